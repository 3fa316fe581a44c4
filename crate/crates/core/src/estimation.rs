//! Covariance-weighted Gauss-Newton refinement of a 6DOF pose change, and
//! first-order compounding of uncertain relative poses.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, symmetrize, Pose, PoseGaussian};
use crate::ground::Keypoint3D;
use crate::matching::Match;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("normal equations are rank deficient")]
    SingularNormalEquations,
    #[error("invalid Gauss-Newton configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussNewtonConfig {
    pub max_iterations: usize,
    /// Stop once the update's 6-vector norm drops below this.
    pub convergence_tol: f64,
    /// Initial Levenberg damping added to the normal equations.
    pub damping: f64,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            convergence_tol: 1e-8,
            damping: 1e-6,
        }
    }
}

impl GaussNewtonConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if self.max_iterations < 1 {
            return Err(EstimationError::InvalidConfig("max_iterations must be >= 1"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(EstimationError::InvalidConfig("convergence_tol must be positive"));
        }
        if !(self.damping >= 0.0) {
            return Err(EstimationError::InvalidConfig("damping must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// `T_ab` with the inverse of the final (undamped) Hessian as covariance.
    pub transform: PoseGaussian,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// `d e / d xi` for `e = a - exp(xi) T b`, evaluated at `xi = 0`.
pub fn residual_jacobian(t_ab: &Pose, point_b: &Vector3<f64>) -> Matrix3x6<f64> {
    let p = t_ab.transform_point(point_b);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&p));
    j
}

struct Problem<'a> {
    pairs: Vec<(&'a Keypoint3D, &'a Keypoint3D)>,
}

impl Problem<'_> {
    fn weight(&self, t: &Pose, ka: &Keypoint3D, kb: &Keypoint3D) -> Option<Matrix3<f64>> {
        let r = t.rotation;
        (ka.covariance + r * kb.covariance * r.transpose()).try_inverse()
    }

    fn cost(&self, t: &Pose) -> f64 {
        self.pairs
            .iter()
            .map(|(ka, kb)| {
                let e = ka.position - t.transform_point(&kb.position);
                match self.weight(t, ka, kb) {
                    Some(w) => (e.transpose() * w * e)[0],
                    None => f64::INFINITY,
                }
            })
            .sum()
    }

    /// Hessian approximation and gradient, accumulated in input order.
    fn normal_equations(&self, t: &Pose) -> (Matrix6<f64>, Vector6<f64>) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (ka, kb) in &self.pairs {
            let Some(w) = self.weight(t, ka, kb) else { continue };
            let e = ka.position - t.transform_point(&kb.position);
            let j = residual_jacobian(t, &kb.position);
            let jt_w = j.transpose() * w;
            h += jt_w * j;
            g += jt_w * e;
        }
        (h, g)
    }
}

fn is_singular(h: &Matrix6<f64>) -> bool {
    let eig = SymmetricEigen::new(symmetrize(h));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    !(max > 0.0) || min <= max * 1e-12
}

/// Minimises `sum e^T W e`, `e = z_a - T z_b`, `W = (Q_a + R Q_b R^T)^-1`,
/// with multiplicative updates `T <- exp(delta) T`.
pub fn refine_pose(
    inliers: &[Match],
    a: &[Keypoint3D],
    b: &[Keypoint3D],
    initial: &Pose,
    config: &GaussNewtonConfig,
) -> Result<PoseEstimate, EstimationError> {
    config.validate()?;
    if inliers.len() < 3 {
        return Err(EstimationError::TooFewCorrespondences(inliers.len()));
    }
    let problem = Problem {
        pairs: inliers.iter().map(|m| (&a[m.index_a], &b[m.index_b])).collect(),
    };

    let mut t = *initial;
    let mut cost = problem.cost(&t);
    let mut history = vec![cost];
    let mut lambda = config.damping;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iterations {
        iterations += 1;
        let (h, g) = problem.normal_equations(&t);
        if is_singular(&h) {
            return Err(EstimationError::SingularNormalEquations);
        }
        let mut accepted = false;
        let mut small_step = false;
        for _ in 0..12 {
            let damped = h + Matrix6::identity() * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda = (lambda * 10.0).max(1e-12);
                continue;
            };
            let delta = -chol.solve(&g);
            let candidate = Pose::exp(&delta).compose(&t).renormalized();
            let candidate_cost = problem.cost(&candidate);
            if candidate_cost <= cost {
                small_step = delta.norm() < config.convergence_tol;
                t = candidate;
                cost = candidate_cost;
                history.push(cost);
                lambda = (lambda / 10.0).max(config.damping.min(1e-12));
                accepted = true;
                break;
            }
            if delta.norm() < config.convergence_tol {
                // Cannot improve further at this resolution.
                small_step = true;
                accepted = true;
                break;
            }
            lambda = (lambda * 10.0).max(1e-12);
        }
        if !accepted {
            break;
        }
        if small_step {
            converged = true;
            break;
        }
    }

    let (h, _) = problem.normal_equations(&t);
    if is_singular(&h) {
        return Err(EstimationError::SingularNormalEquations);
    }
    let covariance = symmetrize(&h.try_inverse().ok_or(EstimationError::SingularNormalEquations)?);
    Ok(PoseEstimate {
        transform: PoseGaussian::new(t, covariance),
        iterations,
        final_cost: cost,
        converged,
        cost_history: history,
    })
}

/// Compounds `previous * step` to first order:
/// `Sigma = Sigma_prev + Ad(T_prev) Sigma_step Ad(T_prev)^T`.
pub fn chain_vo(previous: &PoseGaussian, step: &PoseGaussian) -> PoseGaussian {
    let ad = previous.mean.adjoint();
    PoseGaussian {
        mean: previous.mean.compose(&step.mean),
        covariance: symmetrize(&(previous.covariance + ad * step.covariance * ad.transpose())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{covariance_factor, sample_with_factor, so3_exp};
    use nalgebra::{Vector2, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn kp(p: Vector3<f64>, cov: Matrix3<f64>) -> Keypoint3D {
        Keypoint3D {
            position: p,
            covariance: cov,
            descriptor: vec![],
            source_pixel: Vector2::zeros(),
        }
    }

    fn random_cov(rng: &mut impl Rng, scale: f64) -> Matrix3<f64> {
        let r = so3_exp(&Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)));
        let d = Matrix3::from_diagonal(&Vector3::from_fn(|_, _| scale * scale * rng.random_range(0.2..1.0)));
        r * d * r.transpose()
    }

    fn all_matches(n: usize) -> Vec<Match> {
        (0..n)
            .map(|i| Match { index_a: i, index_b: i, descriptor_distance: 0.0, mahalanobis: 0.0 })
            .collect()
    }

    fn cloud(rng: &mut impl Rng, truth: &Pose, n: usize, scale: f64) -> (Vec<Keypoint3D>, Vec<Keypoint3D>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n {
            let pb = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-0.5..1.0), rng.random_range(0.5..4.0));
            a.push(kp(truth.transform_point(&pb), random_cov(rng, scale)));
            b.push(kp(pb, random_cov(rng, scale)));
        }
        (a, b)
    }

    fn truth() -> Pose {
        Pose {
            rotation: so3_exp(&Vector3::new(0.02, -0.05, 0.03)),
            translation: Vector3::new(0.05, -0.01, 0.24),
        }
    }

    #[test]
    fn zero_residual_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = truth();
        let (a, b) = cloud(&mut rng, &t, 40, 0.05);
        let est = refine_pose(&all_matches(40), &a, &b, &t, &GaussNewtonConfig::default()).unwrap();
        assert!(est.converged);
        assert!(est.iterations <= 2);
        assert!((est.transform.mean.rotation - t.rotation).abs().max() < 1e-10);
        assert!((est.transform.mean.translation - t.translation).abs().max() < 1e-10);
    }

    #[test]
    fn recovers_from_offset_initial_guess() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = truth();
        let (a, b) = cloud(&mut rng, &t, 60, 0.05);
        let offset = Pose {
            rotation: so3_exp(&Vector3::new(0.0, 0.0, 5f64.to_radians())),
            translation: Vector3::new(0.1, 0.0, 0.0),
        };
        let init = offset.compose(&t);
        let est = refine_pose(&all_matches(60), &a, &b, &init, &GaussNewtonConfig::default()).unwrap();
        assert!(est.converged);
        assert!((est.transform.mean.rotation - t.rotation).abs().max() < 1e-8);
        assert!((est.transform.mean.translation - t.translation).abs().max() < 1e-8);
        for w in est.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(est.final_cost <= est.cost_history[0]);
    }

    #[test]
    fn residual_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            let pb = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let pa = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let j = residual_jacobian(&t, &pb);
            let h = 1e-6;
            let mut fd = Matrix3x6::zeros();
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                let ep = pa - Pose::exp(&d).compose(&t).transform_point(&pb);
                let em = pa - Pose::exp(&-d).compose(&t).transform_point(&pb);
                fd.set_column(i, &((ep - em) / (2.0 * h)));
            }
            assert!((j - fd).norm() / fd.norm() < 1e-5);
        }
    }

    #[test]
    fn collinear_geometry_is_singular() {
        let pts: Vec<_> = (0..10).map(|i| kp(Vector3::new(0.0, 0.0, 1.0 + i as f64 * 0.2), Matrix3::identity() * 1e-4)).collect();
        let r = refine_pose(&all_matches(10), &pts, &pts, &Pose::identity(), &GaussNewtonConfig::default());
        assert_eq!(r, Err(EstimationError::SingularNormalEquations));
    }

    #[test]
    fn rejects_bad_config_and_tiny_inputs() {
        let pts: Vec<_> = (0..2).map(|i| kp(Vector3::new(i as f64, 0.0, 1.0), Matrix3::identity())).collect();
        assert!(matches!(
            refine_pose(&all_matches(2), &pts, &pts, &Pose::identity(), &GaussNewtonConfig::default()),
            Err(EstimationError::TooFewCorrespondences(2))
        ));
        let bad = GaussNewtonConfig { max_iterations: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gauge_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = truth();
        let (mut a, mut b) = cloud(&mut rng, &t, 30, 0.03);
        // perturb a so the optimum is not exactly t
        for k in a.iter_mut() {
            k.position += Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01));
        }
        let m = all_matches(30);
        let cfg = GaussNewtonConfig { convergence_tol: 1e-12, max_iterations: 50, ..Default::default() };
        let base = refine_pose(&m, &a, &b, &t, &cfg).unwrap().transform.mean;
        let s = Pose::exp(&Vector6::new(0.5, -1.0, 2.0, 0.3, -0.7, 1.1));
        let move_all = |ks: &mut Vec<Keypoint3D>| {
            for k in ks.iter_mut() {
                k.position = s.transform_point(&k.position);
                k.covariance = s.rotation * k.covariance * s.rotation.transpose();
            }
        };
        move_all(&mut a);
        move_all(&mut b);
        let conj = |p: &Pose| s.compose(p).compose(&s.inverse());
        let moved = refine_pose(&m, &a, &b, &conj(&t), &cfg).unwrap().transform.mean;
        let expected = conj(&base);
        assert!((moved.rotation - expected.rotation).abs().max() < 1e-8);
        assert!((moved.translation - expected.translation).abs().max() < 1e-8);
    }

    #[test]
    fn chain_vo_trivial_cases() {
        let prev = PoseGaussian::with_sigmas(Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 0.0)), &[0.1, 0.2, 0.3, 0.01, 0.02, 0.03]);
        let out = chain_vo(&prev, &PoseGaussian::identity());
        assert_eq!(out.mean, prev.mean);
        assert!((out.covariance - prev.covariance).abs().max() < 1e-18);

        let a = PoseGaussian::with_sigmas(Pose::from_translation(1.0, 0.0, 0.0), &[0.1, 0.2, 0.0, 0.0, 0.0, 0.0]);
        let b = PoseGaussian::with_sigmas(Pose::from_translation(0.0, 2.0, 0.5), &[0.3, 0.1, 0.2, 0.0, 0.0, 0.0]);
        let c = chain_vo(&a, &b);
        assert_eq!(c.mean.translation, Vector3::new(1.0, 2.0, 0.5));
        let expected = [0.01 + 0.09, 0.04 + 0.01, 0.04];
        for i in 0..3 {
            assert!((c.covariance[(i, i)] - expected[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn chain_vo_matches_monte_carlo() {
        let step_mean = Pose {
            rotation: so3_exp(&Vector3::new(0.0, 0.0, 0.01)),
            translation: Vector3::new(0.05, 0.0, 0.0),
        };
        let step = PoseGaussian::with_sigmas(step_mean, &[0.002, 0.001, 0.0005, 0.0003, 0.0003, 0.0008]);
        let mut chained = PoseGaussian::identity();
        for _ in 0..100 {
            chained = chain_vo(&chained, &step);
        }
        let factor = covariance_factor(&step.covariance).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut acc = Matrix6::zeros();
        for _ in 0..n {
            let mut t = Pose::identity();
            for _ in 0..100 {
                t = t.compose(&sample_with_factor(&step.mean, &factor, &mut rng));
            }
            let xi = t.compose(&chained.mean.inverse()).log();
            acc += xi * xi.transpose();
        }
        acc /= n as f64;
        let rel = (acc - chained.covariance).norm() / chained.covariance.norm();
        assert!(rel < 0.15, "relative error {rel}");
    }

    #[test]
    fn normalized_estimation_error_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = truth();
        let cfg = GaussNewtonConfig::default();
        let trials = 500;
        let mut total = 0.0;
        for _ in 0..trials {
            let (mut a, mut b) = cloud(&mut rng, &t, 40, 0.02);
            for k in a.iter_mut().chain(b.iter_mut()) {
                let l = k.covariance.cholesky().unwrap().l();
                let n = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                k.position += l * n;
            }
            let est = refine_pose(&all_matches(40), &a, &b, &t, &cfg).unwrap();
            for w in est.cost_history.windows(2) {
                assert!(w[1] <= w[0]);
            }
            let err = est.transform.mean.compose(&t.inverse()).log();
            let info = est.transform.covariance.try_inverse().unwrap();
            total += (err.transpose() * info * err)[0];
        }
        let mean = total / trials as f64;
        assert!((4.5..=7.5).contains(&mean), "NEES mean {mean}");
    }
}
