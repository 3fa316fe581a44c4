//! Descriptor matching between two keypoint sets, optionally gated by a
//! predicted transform.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{skew, Pose, PoseGaussian};
use crate::ground::Keypoint3D;

/// 99% quantile of chi-square with three degrees of freedom.
pub const CHI2_3DOF_99: f64 = 11.34;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Euclidean descriptor distance above which two keypoints never match.
    pub max_descriptor_distance: f64,
    /// Squared Mahalanobis gate applied when a prior transform is known.
    pub gate_chi2: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_descriptor_distance: 0.4,
            gate_chi2: CHI2_3DOF_99,
        }
    }
}

/// A one-to-one correspondence between `a[index_a]` and `b[index_b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub descriptor_distance: f64,
    /// Squared Mahalanobis distance under the gate; zero when matched without a prior.
    pub mahalanobis: f64,
}

/// Mutual-nearest-neighbour matching. With a prior `T_ab`, candidates whose
/// predicted position falls outside the chi-square gate are removed before
/// descriptors are ranked.
pub fn match_keypoints(
    a: &[Keypoint3D],
    b: &[Keypoint3D],
    prior: Option<&Pose>,
    config: &MatchConfig,
) -> Vec<Match> {
    match prior {
        Some(p) => match_with_gate(a, b, Some(Gate::new(p, None, b)), config),
        None => match_with_gate(a, b, None, config),
    }
}

/// As [`match_keypoints`], additionally inflating the gate by the prior's
/// own uncertainty.
pub fn match_keypoints_gated(
    a: &[Keypoint3D],
    b: &[Keypoint3D],
    prior: &PoseGaussian,
    config: &MatchConfig,
) -> Vec<Match> {
    match_with_gate(a, b, Some(Gate::new(&prior.mean, Some(&prior.covariance), b)), config)
}

struct Gate<'a> {
    prior_cov: Option<&'a Matrix6<f64>>,
    predicted: Vec<Vector3<f64>>,
    rotated_cov: Vec<Matrix3<f64>>,
}

impl<'a> Gate<'a> {
    fn new(pose: &Pose, prior_cov: Option<&'a Matrix6<f64>>, b: &[Keypoint3D]) -> Self {
        let r = pose.rotation;
        Self {
            prior_cov,
            predicted: b.iter().map(|k| pose.transform_point(&k.position)).collect(),
            rotated_cov: b.iter().map(|k| r * k.covariance * r.transpose()).collect(),
        }
    }

    fn distance2(&self, a: &Keypoint3D, j: usize) -> Option<f64> {
        let p = self.predicted[j];
        let mut s = a.covariance + self.rotated_cov[j];
        if let Some(cov) = self.prior_cov {
            let mut jac = nalgebra::Matrix3x6::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&p)));
            s += jac * cov * jac.transpose();
        }
        let e = a.position - p;
        mahalanobis2(&s, &e)
    }
}

pub(crate) fn mahalanobis2(s: &Matrix3<f64>, e: &Vector3<f64>) -> Option<f64> {
    let chol = s.cholesky()?;
    let y = chol.l().solve_lower_triangular(e)?;
    Some(y.norm_squared())
}

fn descriptor_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn match_with_gate(
    a: &[Keypoint3D],
    b: &[Keypoint3D],
    gate: Option<Gate<'_>>,
    config: &MatchConfig,
) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let dim = a[0].descriptor.len();
    assert!(
        a.iter().chain(b).all(|k| k.descriptor.len() == dim),
        "descriptor lengths must agree"
    );

    // Squared distances via |x|^2 + |y|^2 - 2 x.y; only used to shortlist,
    // survivors are re-measured exactly.
    let da = DMatrix::from_fn(a.len(), dim, |i, c| a[i].descriptor[c]);
    let db = DMatrix::from_fn(b.len(), dim, |j, c| b[j].descriptor[c]);
    let dots = &da * db.transpose();
    let na: Vec<f64> = a.iter().map(|k| k.descriptor.iter().map(|v| v * v).sum()).collect();
    let nb: Vec<f64> = b.iter().map(|k| k.descriptor.iter().map(|v| v * v).sum()).collect();
    let tau = config.max_descriptor_distance;
    let shortlist = tau * tau + 1e-6;

    let mut best_a: Vec<Option<(f64, usize, f64)>> = vec![None; a.len()];
    let mut best_b: Vec<Option<(f64, usize)>> = vec![None; b.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let approx = na[i] + nb[j] - 2.0 * dots[(i, j)];
            if approx > shortlist {
                continue;
            }
            let d = descriptor_distance(&a[i].descriptor, &b[j].descriptor);
            if d > tau {
                continue;
            }
            let maha = match &gate {
                Some(g) => match g.distance2(&a[i], j) {
                    Some(m) if m <= config.gate_chi2 => m,
                    _ => continue,
                },
                None => 0.0,
            };
            // strict comparisons: ties keep the lower index
            if best_a[i].is_none_or(|(bd, _, _)| d < bd) {
                best_a[i] = Some((d, j, maha));
            }
            if best_b[j].is_none_or(|(bd, _)| d < bd) {
                best_b[j] = Some((d, i));
            }
        }
    }

    best_a
        .iter()
        .enumerate()
        .filter_map(|(i, best)| {
            let (d, j, maha) = (*best)?;
            match best_b[j] {
                Some((_, back)) if back == i => Some(Match {
                    index_a: i,
                    index_b: j,
                    descriptor_distance: d,
                    mahalanobis: maha,
                }),
                _ => None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_descriptor(rng: &mut impl Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn keypoint(p: Vector3<f64>, sigma: f64, descriptor: Vec<f64>) -> Keypoint3D {
        Keypoint3D {
            position: p,
            covariance: Matrix3::identity() * sigma * sigma,
            descriptor,
            source_pixel: Vector2::zeros(),
        }
    }

    fn scene(rng: &mut impl Rng, n: usize) -> Vec<Keypoint3D> {
        (0..n)
            .map(|_| {
                let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(0.0..1.0), rng.random_range(0.5..3.0));
                keypoint(p, 0.02, random_descriptor(rng))
            })
            .collect()
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = scene(&mut rng, 50);
        let m = match_keypoints(&a, &a, Some(&Pose::identity()), &MatchConfig::default());
        assert_eq!(m.len(), 50);
        for (i, mm) in m.iter().enumerate() {
            assert_eq!((mm.index_a, mm.index_b), (i, i));
            assert_eq!(mm.descriptor_distance, 0.0);
        }
    }

    #[test]
    fn disjoint_descriptors_match_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = scene(&mut rng, 60);
        let b = scene(&mut rng, 60);
        assert!(match_keypoints(&a, &b, None, &MatchConfig::default()).is_empty());
        assert!(match_keypoints(&a, &b, Some(&Pose::identity()), &MatchConfig::default()).is_empty());
    }

    #[test]
    fn gate_rejects_far_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_descriptor(&mut rng);
        let a = vec![keypoint(Vector3::new(0.0, 0.0, 1.0), 0.01, d.clone())];
        let b = vec![keypoint(Vector3::new(0.5, 0.0, 1.0), 0.01, d)];
        let cfg = MatchConfig::default();
        assert_eq!(match_keypoints(&a, &b, None, &cfg).len(), 1);
        assert!(match_keypoints(&a, &b, Some(&Pose::identity()), &cfg).is_empty());
        let shifted = Pose::from_translation(-0.5, 0.0, 0.0);
        let m = match_keypoints(&a, &b, Some(&shifted), &cfg);
        assert_eq!(m.len(), 1);
        assert!(m[0].mahalanobis < 1e-12);
        // prior uncertainty widens the gate
        let loose = PoseGaussian::with_sigmas(Pose::identity(), &[0.3, 0.3, 0.3, 0.01, 0.01, 0.01]);
        assert_eq!(match_keypoints_gated(&a, &b, &loose, &cfg).len(), 1);
    }

    #[test]
    fn matches_are_one_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = scene(&mut rng, 80);
        let mut b = a.clone();
        // duplicate a descriptor so two b entries compete for one a entry
        b[5].descriptor = a[7].descriptor.clone();
        let m = match_keypoints(&a, &b, None, &MatchConfig::default());
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        for mm in &m {
            assert!(seen_a.insert(mm.index_a));
            assert!(seen_b.insert(mm.index_b));
        }
    }

    #[test]
    fn empty_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = scene(&mut rng, 3);
        assert!(match_keypoints(&a, &[], None, &MatchConfig::default()).is_empty());
        assert!(match_keypoints(&[], &a, None, &MatchConfig::default()).is_empty());
    }
}
