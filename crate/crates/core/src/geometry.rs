//! Rigid-body math on SE(3), the pinhole camera model, and Gaussians over poses.
//!
//! Tangent vectors are ordered translation first, then rotation: `[rho; phi]`.
//! Perturbations are applied on the left, `T = exp(xi) * T_mean`, so the
//! adjoint satisfies `T exp(xi) T^-1 = exp(Ad(T) xi)`.

use nalgebra::{Matrix3, Matrix4, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this rotation angle the closed-form exp/log switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("covariance is not positive semi-definite (min eigenvalue {0})")]
    NonPSDCovariance(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("rotation is not orthonormal (|R^T R - I| = {0})")]
    NotOrthonormal(f64),
}

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; reads the antisymmetric part.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = (r.trace() - 1.0) * 0.5;
    let sin_theta = vee(r).norm();
    let theta = sin_theta.atan2(cos_theta);
    if theta < SMALL_ANGLE {
        // sin(theta)/theta ~ 1, so vee(R) is phi to second order.
        return vee(r) * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi the antisymmetric part vanishes; recover the axis from the
        // symmetric part instead.
        let b = (r + Matrix3::identity()) * 0.5;
        let diag = Vector3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)]);
        let i = diag.imax();
        let mut axis = b.column(i).into_owned();
        axis /= axis.norm();
        let candidate = axis * theta;
        let v = vee(r);
        // pick the sign consistent with the small residual antisymmetric part
        return if v.dot(&candidate) < 0.0 { -candidate } else { candidate };
    }
    vee(r) * (theta / sin_theta)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// A rigid transform `T_{a,b}` mapping points in frame `b` into frame `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = orthonormality_error(&rotation);
        if err > 1e-9 || rotation.determinant() < 0.0 {
            return Err(GeometryError::NotOrthonormal(err));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(&Vector3::new(0.0, 0.0, yaw)),
            translation,
        }
    }

    /// SE(3) exponential of `[rho; phi]`.
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let phi = xi.fixed_rows::<3>(3).into_owned();
        Self {
            rotation: so3_exp(&phi),
            translation: so3_left_jacobian(&phi) * rho,
        }
    }

    pub fn log(&self) -> Vector6<f64> {
        let phi = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&rho);
        xi.fixed_rows_mut::<3>(3).copy_from(&phi);
        xi
    }

    /// `self * other`: apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// 6x6 adjoint, `[R, t^ R; 0, R]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * self.rotation));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    /// Yaw of the rotated x-axis projected into the xy-plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }

    /// Projects the rotation back onto SO(3) when round-off has accumulated.
    pub fn renormalized(&self) -> Pose {
        if self.orthonormality_error() <= 1e-9 {
            return *self;
        }
        let svd = self.rotation.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn adjoint(p: &Pose) -> Matrix6<f64> {
    p.adjoint()
}

/// A Gaussian on SE(3): `T = exp(xi) * mean`, `xi ~ N(0, covariance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseGaussian {
    pub mean: Pose,
    pub covariance: Matrix6<f64>,
}

impl PoseGaussian {
    pub fn new(mean: Pose, covariance: Matrix6<f64>) -> Self {
        Self { mean, covariance }
    }

    pub fn exact(mean: Pose) -> Self {
        Self {
            mean,
            covariance: Matrix6::zeros(),
        }
    }

    pub fn identity() -> Self {
        Self::exact(Pose::identity())
    }

    /// Diagonal covariance from per-generator standard deviations.
    pub fn with_sigmas(mean: Pose, sigmas: &[f64; 6]) -> Self {
        let mut cov = Matrix6::zeros();
        for (i, s) in sigmas.iter().enumerate() {
            cov[(i, i)] = s * s;
        }
        Self {
            mean,
            covariance: cov,
        }
    }

    pub fn inverse(&self) -> PoseGaussian {
        let inv = self.mean.inverse();
        let ad = inv.adjoint();
        PoseGaussian {
            mean: inv,
            covariance: symmetrize(&(ad * self.covariance * ad.transpose())),
        }
    }
}

pub fn symmetrize(m: &Matrix6<f64>) -> Matrix6<f64> {
    (m + m.transpose()) * 0.5
}

/// Draws one pose from `g`. The same seed always yields the same pose.
pub fn sample_pose_gaussian(g: &PoseGaussian, seed: u64) -> Result<Pose, GeometryError> {
    let factor = covariance_factor(&g.covariance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_with_factor(&g.mean, &factor, &mut rng))
}

/// Square-root factor `L` with `L L^T = cov`, tolerant of singular PSD input.
pub fn covariance_factor(cov: &Matrix6<f64>) -> Result<Matrix6<f64>, GeometryError> {
    let sym = symmetrize(cov);
    let scale = sym.abs().max().max(1.0);
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -1e-12 * scale {
        return Err(GeometryError::NonPSDCovariance(min));
    }
    let mut l = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    Ok(l)
}

pub(crate) fn sample_with_factor(
    mean: &Pose,
    factor: &Matrix6<f64>,
    rng: &mut impl rand::Rng,
) -> Pose {
    let n = Vector6::from_fn(|_, _| StandardNormal.sample(rng));
    let xi = factor * n;
    if xi.iter().all(|v| *v == 0.0) {
        return *mean;
    }
    Pose::exp(&xi).compose(mean)
}

/// Pinhole intrinsics for rectified images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fu,
            fv,
            cu,
            cv,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fu > 0.0 && self.fv > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(self.cu > 0.0 && self.cu < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics("c_u outside the image"));
        }
        if !(self.cv > 0.0 && self.cv < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics("c_v outside the image"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fu, 0.0, self.cu, 0.0, self.fv, self.cv, 0.0, 0.0, 1.0)
    }

    /// Pixel to normalized image-plane coordinates, `K^-1 y`.
    pub fn normalize(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cu) / self.fu, (v - self.cv) / self.fv)
    }

    pub fn denormalize(&self, px: f64, py: f64) -> (f64, f64) {
        (self.fu * px + self.cu, self.fv * py + self.cv)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

pub fn project(k: &CameraIntrinsics, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if point.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(point.z));
    }
    let (u, v) = k.denormalize(point.x / point.z, point.y / point.z);
    Ok(Vector2::new(u, v))
}

/// A detected feature: sub-pixel location, its uncertainty, and a descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelObservation {
    pub u: f64,
    pub v: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub descriptor: Vec<f64>,
}
