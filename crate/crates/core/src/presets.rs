//! Ready-made run configurations for the standard scenarios.

use crate::config::{DepthSource, RunConfig};
use crate::sim::{DropoutRegion, NoiseConfig, Region, Script, Terrain};

/// Straight route over flat ground with the default detector noise.
pub fn flat_route(length: f64, speed: f64) -> RunConfig {
    let mut cfg = RunConfig {
        script: Script::straight(length, speed),
        ..RunConfig::default()
    };
    cfg.repeat.speed = speed;
    cfg
}

/// As [`flat_route`] with every noise source switched off, so the ground
/// model is exact.
pub fn exact_flat_route(length: f64, speed: f64) -> RunConfig {
    let mut cfg = flat_route(length, speed);
    cfg.noise = NoiseConfig::none();
    cfg
}

/// Straight route across bumps, a hill and a valley.
pub fn rough_route(length: f64, speed: f64) -> RunConfig {
    let mut cfg = flat_route(length, speed);
    cfg.terrain = Terrain::dome(0.15, length);
    cfg
}

/// Removes `rate` of the features on a band of the route starting `start`
/// metres along x.
pub fn add_low_texture_patch(cfg: &mut RunConfig, start: f64, length: f64, rate: f64) {
    cfg.world.dropout_regions.push(DropoutRegion {
        region: Region {
            x_min: start,
            x_max: start + length,
            y_min: -10.0,
            y_max: 10.0,
            blend: 0.0,
        },
        rate,
    });
}

pub fn with_depth(mut cfg: RunConfig, depth: DepthSource) -> RunConfig {
    cfg.depth = depth;
    cfg
}
