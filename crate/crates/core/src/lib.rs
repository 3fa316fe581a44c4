// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod estimation;
pub mod eval;
pub mod format;
pub mod geometry;
pub mod ground;
pub mod matching;
pub mod pipeline;
pub mod presets;
pub mod ransac;
pub mod repeat;
pub mod sim;
pub mod teach;
