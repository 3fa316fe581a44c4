//! Teaches a 10 m straight route and saves the keyframe map. Pass a path to
//! choose where the map goes.

use monovtr::pipeline::{run_teach, Scenario};
use monovtr::presets::flat_route;
use monovtr::teach::{load_path, save_path};

fn main() {
    let scenario = Scenario::new(flat_route(10.0, 0.6)).expect("valid config");
    let run = run_teach(&scenario).expect("teach pass");
    let path = &run.path;
    println!("{} frames -> {} keyframes, {:.2} m of path", run.frames, path.len(), path.length());
    for e in path.edges.iter().step_by(8) {
        let t = e.transform.mean.translation;
        println!(
            "edge {:>2}->{:<2}  step {:.3} m  {} matches  sigma_z {:.4} m",
            e.from_id,
            e.to_id,
            t.norm(),
            e.matches.len(),
            e.transform.covariance[(2, 2)].sqrt()
        );
    }
    let first = &path.keyframes[0];
    println!("keyframe 0 holds {} landmarks", first.keypoints.len());

    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("route.vtrmap"));
    save_path(path, &out).expect("map written");
    let back = load_path(&out).expect("map read back");
    println!("map -> {} ({} bytes, identical after reload: {})", out.display(), std::fs::metadata(&out).unwrap().len(), &back == path);
}
