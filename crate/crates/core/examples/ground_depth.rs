//! Back-projects a column of pixels onto the ground with the default rig and
//! prints each point's depth and positional uncertainty.

use monovtr::geometry::PixelObservation;
use monovtr::ground::Rig;

fn main() {
    let rig = Rig::default();
    let bp = rig.ground.backprojector(&rig.intrinsics);
    let c = bp.coefficients();
    println!("plane coefficients k1..k4: {:.4} {:.4} {:.4} {:.4}", c.k1, c.k2, c.k3, c.k4);
    println!("camera height {:.3} m", rig.ground.camera_height());
    println!();
    println!("{:>6} {:>8} {:>8} {:>8} {:>10}", "v", "x", "y", "depth", "sigma_z");
    for v in (100..384).step_by(30) {
        let obs = PixelObservation {
            u: 256.0,
            v: v as f64,
            sigma_u: 0.5,
            sigma_v: 0.5,
            descriptor: vec![],
        };
        match bp.backproject(&obs) {
            Ok(k) => println!(
                "{v:>6} {:>8.3} {:>8.3} {:>8.3} {:>10.4}",
                k.position.x,
                k.position.y,
                k.position.z,
                k.covariance[(2, 2)].sqrt()
            ),
            Err(e) => println!("{v:>6}  {e}"),
        }
    }
}
