//! Runs the same rough route with ground-plane depth and with true depth,
//! and prints the two evaluations side by side.

use monovtr::config::DepthSource;
use monovtr::eval::{comparison_text, evaluate};
use monovtr::pipeline::{run_repeat, run_teach, Scenario};
use monovtr::presets::{add_low_texture_patch, rough_route, with_depth};

fn main() {
    let length = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50.0);
    let mut runs = Vec::new();
    for (label, depth) in [("mono", DepthSource::Mono), ("true_depth", DepthSource::PerfectDepth)] {
        let teach = with_depth(rough_route(length, 0.3), depth);
        let mut repeat = teach.clone();
        add_low_texture_patch(&mut repeat, 0.3 * length, 4.0, 1.0);
        let taught = run_teach(&Scenario::new(teach).unwrap()).expect("teach pass");
        let run = run_repeat(&Scenario::new(repeat).unwrap(), &taught.path).expect("repeat pass");
        runs.push((label.to_string(), evaluate(&run.log)));
    }
    print!("{}", comparison_text(&runs));
}
