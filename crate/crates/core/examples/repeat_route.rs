//! Teaches a route over gently rolling ground, repeats it in closed loop
//! and prints the evaluation report.

use monovtr::eval::evaluate;
use monovtr::pipeline::{run_repeat, run_teach, Scenario};
use monovtr::presets::rough_route;

fn main() {
    let length = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20.0);
    let scenario = Scenario::new(rough_route(length, 0.4)).expect("valid config");
    let taught = run_teach(&scenario).expect("teach pass");
    println!("taught {} keyframes over {:.2} m", taught.path.len(), taught.path.length());

    let run = run_repeat(&scenario, &taught.path).expect("repeat pass");
    print!("{}", evaluate(&run.log).to_text());
    println!("reached destination {}", run.reached_destination);

    for r in run.log.records.iter().step_by(60) {
        println!(
            "t {:>5.1}  x {:>6.2}  lateral est {:>7.4} true {:>7.4}  map matches {:>3}  {}",
            r.t, r.true_position.x, r.est_lateral, r.true_lateral, r.map_matches, r.mode
        );
    }
}
