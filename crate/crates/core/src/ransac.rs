//! 3-point RANSAC over 3D-3D keypoint matches.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::ground::Keypoint3D;
use crate::matching::{mahalanobis2, Match, CHI2_3DOF_99};

/// Triads whose smallest altitude is below this (metres) are rejected.
pub const MIN_TRIAD_ALTITUDE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RansacError {
    #[error("need at least 3 matches, got {0}")]
    TooFewMatches(usize),
    #[error("sampled points are collinear")]
    DegenerateSample,
    #[error("best hypothesis has {found} inliers, {required} required")]
    InsufficientInliers { found: usize, required: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_chi2: f64,
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            inlier_chi2: CHI2_3DOF_99,
            min_inliers: 10,
            confidence: 0.99,
            seed: 0,
        }
    }
}

/// Best hypothesis `T_ab` (frame b into frame a) and the matches it explains.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: Pose,
    pub inliers: Vec<Match>,
    pub iterations_used: usize,
}

/// Least-squares rotation and translation taking `src` onto `dst`
/// (orthogonal Procrustes with a reflection guard). Exact for noise-free,
/// non-collinear input.
pub fn fit_rigid(dst: &[Vector3<f64>], src: &[Vector3<f64>], weights: Option<&[f64]>) -> Pose {
    let n = dst.len();
    debug_assert_eq!(n, src.len());
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..n).map(w).sum();
    let cd = (0..n).map(|i| dst[i] * w(i)).sum::<Vector3<f64>>() / total;
    let cs = (0..n).map(|i| src[i] * w(i)).sum::<Vector3<f64>>() / total;
    let mut h = Matrix3::zeros();
    for i in 0..n {
        h += (src[i] - cs) * (dst[i] - cd).transpose() * w(i);
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    Pose {
        rotation,
        translation: cd - rotation * cs,
    }
}

/// Smallest altitude of the triangle `p0 p1 p2`.
pub fn min_altitude(p: &[Vector3<f64>; 3]) -> f64 {
    let area2 = (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
    let longest = (p[1] - p[0])
        .norm()
        .max((p[2] - p[1]).norm())
        .max((p[0] - p[2]).norm());
    if longest == 0.0 {
        0.0
    } else {
        area2 / longest
    }
}

/// Closed-form alignment of two point triads.
pub fn solve_triad(dst: &[Vector3<f64>; 3], src: &[Vector3<f64>; 3]) -> Result<Pose, RansacError> {
    if min_altitude(dst) < MIN_TRIAD_ALTITUDE || min_altitude(src) < MIN_TRIAD_ALTITUDE {
        return Err(RansacError::DegenerateSample);
    }
    Ok(fit_rigid(dst, src, None))
}

/// Squared Mahalanobis residual of one match under `t_ab`, using
/// `Q_a + R Q_b R^T`.
pub fn match_residual2(t_ab: &Pose, m: &Match, a: &[Keypoint3D], b: &[Keypoint3D]) -> f64 {
    let ka = &a[m.index_a];
    let kb = &b[m.index_b];
    let r = t_ab.rotation;
    let s = ka.covariance + r * kb.covariance * r.transpose();
    let e = ka.position - t_ab.transform_point(&kb.position);
    mahalanobis2(&s, &e).unwrap_or(f64::INFINITY)
}

/// Indices into `matches` that `t_ab` explains within `chi2`.
pub fn score(t_ab: &Pose, matches: &[Match], a: &[Keypoint3D], b: &[Keypoint3D], chi2: f64) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter(|(_, m)| match_residual2(t_ab, m, a, b) <= chi2)
        .map(|(i, _)| i)
        .collect()
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let w3 = inlier_ratio.powi(3);
    if w3 >= 1.0 {
        return 1;
    }
    if w3 <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w3).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

fn refit(indices: &[usize], matches: &[Match], a: &[Keypoint3D], b: &[Keypoint3D]) -> Pose {
    let dst: Vec<_> = indices.iter().map(|&i| a[matches[i].index_a].position).collect();
    let src: Vec<_> = indices.iter().map(|&i| b[matches[i].index_b].position).collect();
    let w: Vec<_> = indices
        .iter()
        .map(|&i| 1.0 / (a[matches[i].index_a].covariance.trace() + b[matches[i].index_b].covariance.trace()).max(1e-12))
        .collect();
    fit_rigid(&dst, &src, Some(&w))
}

pub fn ransac_pose(
    matches: &[Match],
    a: &[Keypoint3D],
    b: &[Keypoint3D],
    config: &RansacConfig,
) -> Result<RansacResult, RansacError> {
    if matches.len() < 3 {
        return Err(RansacError::TooFewMatches(matches.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Pose, Vec<usize>)> = None;
    let mut needed = config.max_iterations;
    let mut iterations = 0;
    while iterations < needed.min(config.max_iterations) {
        iterations += 1;
        let idx = sample(&mut rng, matches.len(), 3);
        let pick = |k: usize| &matches[idx.index(k)];
        let dst = [a[pick(0).index_a].position, a[pick(1).index_a].position, a[pick(2).index_a].position];
        let src = [b[pick(0).index_b].position, b[pick(1).index_b].position, b[pick(2).index_b].position];
        let Ok(hypothesis) = solve_triad(&dst, &src) else {
            continue;
        };
        let inliers = score(&hypothesis, matches, a, b, config.inlier_chi2);
        if best.as_ref().is_none_or(|(_, s)| inliers.len() > s.len()) {
            let ratio = inliers.len() as f64 / matches.len() as f64;
            needed = required_iterations(ratio, config.confidence);
            best = Some((hypothesis, inliers));
        }
    }

    let Some((mut transform, mut inliers)) = best else {
        return Err(RansacError::InsufficientInliers {
            found: 0,
            required: config.min_inliers,
        });
    };

    // Refit on the consensus set while it keeps growing; the returned set is
    // always exactly what the returned transform scores.
    for _ in 0..5 {
        if inliers.len() < 3 {
            break;
        }
        let candidate = refit(&inliers, matches, a, b);
        let rescored = score(&candidate, matches, a, b, config.inlier_chi2);
        if rescored.len() < inliers.len() {
            break;
        }
        let unchanged = rescored == inliers;
        transform = candidate;
        inliers = rescored;
        if unchanged {
            break;
        }
    }

    if inliers.len() < config.min_inliers {
        return Err(RansacError::InsufficientInliers {
            found: inliers.len(),
            required: config.min_inliers,
        });
    }
    Ok(RansacResult {
        transform,
        inliers: inliers.into_iter().map(|i| matches[i]).collect(),
        iterations_used: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use nalgebra::Vector2;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn kp(p: Vector3<f64>, sigma: f64) -> Keypoint3D {
        Keypoint3D {
            position: p,
            covariance: Matrix3::identity() * sigma * sigma,
            descriptor: vec![0.0],
            source_pixel: Vector2::zeros(),
        }
    }

    fn identity_matches(n: usize) -> Vec<Match> {
        (0..n)
            .map(|i| Match {
                index_a: i,
                index_b: i,
                descriptor_distance: 0.0,
                mahalanobis: 0.0,
            })
            .collect()
    }

    /// 50 true correspondences under `truth` with `noise` metres of jitter,
    /// plus `outliers` matches to unrelated points.
    fn planted(rng: &mut impl Rng, truth: &Pose, noise: f64, outliers: usize) -> (Vec<Keypoint3D>, Vec<Keypoint3D>) {
        let jitter = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..(50 + outliers) {
            let pb = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-0.2..0.4), rng.random_range(0.5..4.0));
            let pa = if i < 50 {
                truth.transform_point(&pb)
                    + if noise > 0.0 { Vector3::from_fn(|_, _| jitter.sample(rng)) } else { Vector3::zeros() }
            } else {
                Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-0.2..0.4), rng.random_range(0.5..4.0))
            };
            a.push(kp(pa, noise.max(0.005)));
            b.push(kp(pb, noise.max(0.005)));
        }
        (a, b)
    }

    #[test]
    fn triad_solver_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let truth = Pose::exp(&nalgebra::Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            let src: [Vector3<f64>; 3] = std::array::from_fn(|_| Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)));
            let dst = src.map(|p| truth.transform_point(&p));
            let Ok(est) = solve_triad(&dst, &src) else { continue };
            assert!((est.rotation - truth.rotation).abs().max() < 1e-9);
            assert!((est.translation - truth.translation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn collinear_triad_rejected() {
        let src = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0), Vector3::new(2.0, 0.0, 1.0)];
        assert_eq!(solve_triad(&src, &src), Err(RansacError::DegenerateSample));
    }

    #[test]
    fn identity_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = planted(&mut rng, &Pose::identity(), 0.0, 0);
        let res = ransac_pose(&identity_matches(50), &a, &b, &RansacConfig::default()).unwrap();
        assert!((res.transform.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(res.transform.translation.norm() < 1e-9);
        assert_eq!(res.inliers.len(), 50);
    }

    #[test]
    fn collinear_points_exhaust_samples() {
        let pts: Vec<_> = (0..30).map(|i| kp(Vector3::new(0.0, 0.0, 0.5 + i as f64 * 0.1), 0.01)).collect();
        let err = ransac_pose(&identity_matches(30), &pts, &pts, &RansacConfig::default()).unwrap_err();
        assert_eq!(err, RansacError::InsufficientInliers { found: 0, required: 10 });
    }

    #[test]
    fn too_few_matches() {
        let pts: Vec<_> = (0..2).map(|i| kp(Vector3::new(i as f64, 0.0, 1.0), 0.01)).collect();
        assert_eq!(
            ransac_pose(&identity_matches(2), &pts, &pts, &RansacConfig::default()),
            Err(RansacError::TooFewMatches(2))
        );
    }

    #[test]
    fn planted_transform_with_outliers() {
        let truth = Pose {
            rotation: so3_exp(&Vector3::new(0.0, 2f64.to_radians(), 0.0)),
            translation: Vector3::new(0.0, 0.0, 0.25),
        };
        let mut ok = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            // 30% of all matches are outliers: 50 true + 21 wrong.
            let (a, b) = planted(&mut rng, &truth, 0.005, 21);
            let cfg = RansacConfig { seed, ..Default::default() };
            let Ok(res) = ransac_pose(&identity_matches(71), &a, &b, &cfg) else { continue };
            let dt = (res.transform.translation - truth.translation).norm();
            let dr = res.transform.compose(&truth.inverse()).rotation_angle();
            if dt < 0.02 && dr < 0.5f64.to_radians() {
                ok += 1;
            }
        }
        assert!(ok >= 99, "{ok}/100");
    }

    #[test]
    fn deterministic_and_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = Pose::from_yaw(0.1, Vector3::new(0.1, 0.0, 0.2));
        let (a, b) = planted(&mut rng, &truth, 0.01, 25);
        let m = identity_matches(75);
        let cfg = RansacConfig { seed: 42, ..Default::default() };
        let r1 = ransac_pose(&m, &a, &b, &cfg).unwrap();
        let r2 = ransac_pose(&m, &a, &b, &cfg).unwrap();
        assert_eq!(r1, r2);
        let rescored: Vec<Match> = score(&r1.transform, &m, &a, &b, cfg.inlier_chi2).into_iter().map(|i| m[i]).collect();
        assert_eq!(rescored, r1.inliers);
        for inl in &r1.inliers {
            assert!(match_residual2(&r1.transform, inl, &a, &b) <= cfg.inlier_chi2);
        }
    }

    #[test]
    fn adaptive_iteration_count() {
        assert_eq!(required_iterations(1.0, 0.99), 1);
        assert_eq!(required_iterations(0.0, 0.99), usize::MAX);
        // w = 0.5: log(0.01)/log(1 - 0.125) = 34.5
        assert_eq!(required_iterations(0.5, 0.99), 35);
    }
}
