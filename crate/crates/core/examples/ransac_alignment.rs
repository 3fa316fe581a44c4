//! Recovers a rigid motion from 3D matches contaminated with outliers, then
//! polishes it with the covariance-weighted Gauss-Newton solver.

use monovtr::estimation::{refine_pose, GaussNewtonConfig};
use monovtr::geometry::{so3_exp, Pose};
use monovtr::ground::Keypoint3D;
use monovtr::matching::Match;
use monovtr::ransac::{ransac_pose, RansacConfig};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn kp(p: Vector3<f64>, sigma: f64) -> Keypoint3D {
    Keypoint3D {
        position: p,
        covariance: Matrix3::identity() * sigma * sigma,
        descriptor: vec![],
        source_pixel: Vector2::zeros(),
    }
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth = Pose {
        rotation: so3_exp(&Vector3::new(0.01, -0.12, 0.02)),
        translation: Vector3::new(0.15, 0.0, 0.4),
    };
    let sigma = 0.01;
    let noise = Normal::new(0.0, sigma).unwrap();
    let (n, outliers) = (200, 80);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..n {
        let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(0.3..1.0), rng.random_range(1.0..8.0));
        let q = if i < n - outliers {
            truth.transform_point(&p) + Vector3::from_fn(|_, _| noise.sample(&mut rng))
        } else {
            Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(0.3..1.0), rng.random_range(1.0..8.0))
        };
        a.push(kp(q, sigma));
        b.push(kp(p, sigma));
    }
    let matches: Vec<Match> = (0..n)
        .map(|i| Match {
            index_a: i,
            index_b: i,
            descriptor_distance: 0.0,
            mahalanobis: 0.0,
        })
        .collect();

    let r = ransac_pose(&matches, &a, &b, &RansacConfig::default()).expect("consensus found");
    let est = refine_pose(&r.inliers, &a, &b, &r.transform, &GaussNewtonConfig::default()).unwrap();
    let err = |t: &Pose| {
        let e = t.compose(&truth.inverse());
        (e.translation.norm() * 1000.0, e.rotation_angle().to_degrees())
    };
    let (rt, rr) = err(&r.transform);
    let (gt, gr) = err(&est.transform.mean);
    println!("{} inliers of {n} after {} iterations", r.inliers.len(), r.iterations_used);
    println!("ransac       error {rt:.2} mm  {rr:.4} deg");
    println!("gauss-newton error {gt:.2} mm  {gr:.4} deg  ({} iterations)", est.iterations);
    let s = est.transform.covariance.diagonal().map(f64::sqrt);
    println!("reported sigmas  t {:.2} {:.2} {:.2} mm", s[0] * 1e3, s[1] * 1e3, s[2] * 1e3);
}
