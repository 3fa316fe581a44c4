//! Chains a noisy odometry step and watches the pose covariance grow, then
//! checks the first-order result against sampled trajectories.

use monovtr::estimation::chain_vo;
use monovtr::geometry::{sample_pose_gaussian, so3_exp, Pose, PoseGaussian};
use nalgebra::{Matrix6, Vector3};

fn main() {
    let step = PoseGaussian::with_sigmas(
        Pose {
            rotation: so3_exp(&Vector3::new(0.0, 0.0, 0.02)),
            translation: Vector3::new(0.1, 0.0, 0.0),
        },
        &[0.003, 0.002, 0.001, 0.0005, 0.0005, 0.001],
    );
    let mut chained = PoseGaussian::identity();
    for k in 1..=50 {
        chained = chain_vo(&chained, &step);
        if k % 10 == 0 {
            let d = chained.covariance.diagonal();
            println!(
                "step {k:>3}  x {:>6.3} y {:>6.3}  sigma_x {:.4} sigma_y {:.4} sigma_yaw {:.4}",
                chained.mean.translation.x,
                chained.mean.translation.y,
                d[0].sqrt(),
                d[1].sqrt(),
                d[5].sqrt()
            );
        }
    }

    let n = 2000;
    let mut acc = Matrix6::zeros();
    for i in 0..n {
        let mut t = Pose::identity();
        for k in 0..50 {
            t = t.compose(&sample_pose_gaussian(&step, (i * 50 + k) as u64).unwrap());
        }
        let xi = t.compose(&chained.mean.inverse()).log();
        acc += xi * xi.transpose();
    }
    acc /= n as f64;
    let rel = (acc - chained.covariance).norm() / chained.covariance.norm();
    println!("sampled vs linearised covariance: {:.1}% apart over {n} runs", rel * 100.0);
}
