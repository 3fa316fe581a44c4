//! Repeats a route where a stretch of ground has lost its texture since the
//! teach pass. Localization drops to VO, then to a stopped search, and the
//! operator drives through until the map is found again.

use monovtr::eval::evaluate;
use monovtr::pipeline::{run_repeat, run_teach, Scenario};
use monovtr::presets::{add_low_texture_patch, rough_route};

fn main() {
    let teach = rough_route(30.0, 0.3);
    let mut repeat = teach.clone();
    add_low_texture_patch(&mut repeat, 10.0, 4.0, 1.0);

    let taught = run_teach(&Scenario::new(teach).unwrap()).expect("teach pass");
    let run = run_repeat(&Scenario::new(repeat).unwrap(), &taught.path).expect("repeat pass");

    let mut last = None;
    for r in &run.log.records {
        if last != Some(r.mode) {
            println!(
                "t {:>6.2}  x {:>6.2}  -> {:<9}  vo {:>3}  map {:>3}{}",
                r.t,
                r.true_position.x,
                r.mode.as_str(),
                r.vo_matches,
                r.map_matches,
                if r.intervention { "  operator driving" } else { "" }
            );
            last = Some(r.mode);
        }
    }
    println!();
    print!("{}", evaluate(&run.log).to_text());
}
