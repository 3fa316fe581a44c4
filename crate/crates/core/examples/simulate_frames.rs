//! Drives an L-shaped route through a generated world and records the
//! detector output frame by frame. The frames are written to a file that
//! round-trips through the frame stream format.

use monovtr::config::RunConfig;
use monovtr::pipeline::Scenario;
use monovtr::sim::stream::{load_frames, save_frames};
use monovtr::sim::{scripted_teach_drive, Script, Waypoint};

fn main() {
    let mut cfg = RunConfig::default();
    let mut script = Script::straight(6.0, 0.5);
    script.waypoints.push(Waypoint {
        x: 6.0,
        y: 4.0,
        heading_deg: None,
    });
    cfg.script = script;
    let scenario = Scenario::new(cfg.clone()).expect("valid config");
    println!(
        "world: {} landmarks, route {:.2} m over {:.1} s",
        scenario.world.field.landmarks.len(),
        scenario.script.length(),
        scenario.script.duration()
    );

    let frames: Vec<_> = scripted_teach_drive(
        &scenario.world,
        &scenario.script,
        &scenario.rig,
        &cfg.noise,
        &cfg.render_options(),
        cfg.seed,
    )
    .collect();
    for f in frames.iter().step_by(40) {
        let p = f.vehicle.pose.translation;
        println!(
            "frame {:>4}  t {:>5.2}  pos ({:>5.2}, {:>5.2})  heading {:>6.1} deg  features {}",
            f.index,
            f.time,
            p.x,
            p.y,
            f.vehicle.heading.to_degrees(),
            f.rendered.observations.len()
        );
    }

    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("frames.bin"));
    save_frames(&frames, &out).expect("frames written");
    let back = load_frames(&out).expect("frames read back");
    println!("{} frames -> {} (round trip exact: {})", frames.len(), out.display(), back == frames);
}
