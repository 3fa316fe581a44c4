//! Metric depth for features on a locally planar ground surface.
//!
//! A pixel ray is intersected with the `z = 0` plane of the ground frame
//! `F_g`. The vehicle-to-camera transform `T_cv` is a fixed rig calibration;
//! the ground-to-vehicle transform `T_vg` is uncertain, which is how the
//! model absorbs terrain that is not actually flat. Each resulting 3D point
//! carries a covariance built from pixel noise and the `T_vg` prior.

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Matrix3x6, Matrix6, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, CameraIntrinsics, PixelObservation, Pose, PoseGaussian};

/// Denominators smaller than this are treated as rays parallel to the ground.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("pixel ray is parallel to the ground plane (denominator {0:e})")]
    DegenerateRay(f64),
    #[error("pixel ray meets the ground plane behind the camera (depth {0})")]
    NegativeDepth(f64),
    #[error("depth {depth} exceeds the maximum range {max_range}")]
    OutOfRange { depth: f64, max_range: f64 },
    #[error("observation ({0}, {1}) lies outside the image")]
    OutsideImage(f64, f64),
    #[error("camera is not above the ground plane (height {0})")]
    CameraBelowGround(f64),
    #[error("max_range must be positive")]
    InvalidRange,
}

/// The planar ground prior: rig calibration, ground pose with uncertainty,
/// and a validity cutoff on depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundModel {
    /// vehicle -> camera
    pub t_cv: Pose,
    /// ground -> vehicle
    pub t_vg: PoseGaussian,
    pub max_range: f64,
}

impl GroundModel {
    pub fn new(t_cv: Pose, t_vg: PoseGaussian, max_range: f64) -> Result<Self, DepthError> {
        let model = Self {
            t_cv,
            t_vg,
            max_range,
        };
        model.validate()?;
        Ok(model)
    }

    /// A forward-looking camera `height` metres above the vehicle footprint,
    /// pitched `pitch` radians below horizontal. The vehicle frame is x
    /// forward, y left, z up; the camera frame is x right, y down, z along
    /// the optical axis. Ground and vehicle frames coincide at the mean.
    pub fn forward_rig(
        height: f64,
        pitch: f64,
        sigma_translation: f64,
        sigma_rotation: f64,
        max_range: f64,
    ) -> Result<Self, DepthError> {
        let t_vc = camera_mount(height, pitch, 0.0);
        let s = [
            sigma_translation,
            sigma_translation,
            sigma_translation,
            sigma_rotation,
            sigma_rotation,
            sigma_rotation,
        ];
        Self::new(
            t_vc.inverse(),
            PoseGaussian::with_sigmas(Pose::identity(), &s),
            max_range,
        )
    }

    pub fn validate(&self) -> Result<(), DepthError> {
        if !(self.max_range > 0.0) {
            return Err(DepthError::InvalidRange);
        }
        let h = self.camera_height();
        if !(h > 0.0) {
            return Err(DepthError::CameraBelowGround(h));
        }
        Ok(())
    }

    /// ground -> camera at the mean ground pose.
    pub fn t_cg(&self) -> Pose {
        self.t_cv.compose(&self.t_vg.mean)
    }

    /// Height of the camera centre above the ground plane.
    pub fn camera_height(&self) -> f64 {
        self.t_cg().inverse().translation.z
    }

    pub fn coefficients(&self) -> PlaneCoefficients {
        plane_coefficients(&self.t_cg())
    }

    /// Same model with every `T_vg` standard deviation multiplied by `factor`.
    pub fn with_scaled_uncertainty(&self, factor: f64) -> Self {
        let mut m = *self;
        m.t_vg.covariance *= factor * factor;
        m
    }

    pub fn backprojector<'a>(&'a self, k: &'a CameraIntrinsics) -> Backprojector<'a> {
        Backprojector::new(self, k)
    }
}

/// Ground model plus the intrinsics of the camera it describes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub ground: GroundModel,
    pub intrinsics: CameraIntrinsics,
}

impl Default for Rig {
    /// 512x384 camera 1 m up, pitched 47 degrees down, with 10 cm / 10 degree
    /// ground-pose standard deviations.
    fn default() -> Self {
        Self {
            ground: GroundModel::forward_rig(1.0, 47f64.to_radians(), 0.10, 10f64.to_radians(), 10.0)
                .expect("default rig is valid"),
            intrinsics: CameraIntrinsics::new(400.0, 400.0, 256.0, 192.0, 512, 384)
                .expect("default intrinsics are valid"),
        }
    }
}

/// Vehicle-frame pose of a camera mounted `forward` metres ahead of the
/// footprint at `height`, pitched down by `pitch` radians (`T_vc`).
pub fn camera_mount(height: f64, pitch: f64, forward: f64) -> Pose {
    let (s, c) = pitch.sin_cos();
    let x = Vector3::new(0.0, -1.0, 0.0);
    let y = Vector3::new(-s, 0.0, -c);
    let z = Vector3::new(c, 0.0, -s);
    Pose {
        rotation: Matrix3::from_columns(&[x, y, z]),
        translation: Vector3::new(forward, 0.0, height),
    }
}

/// The four scalars that turn normalized image coordinates into depth:
/// `depth = k1 / (k2 + k3 px + k4 py)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneCoefficients {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
}

pub fn plane_coefficients(t_cg: &Pose) -> PlaneCoefficients {
    // T(m, n) with 1-based indices over the 3x4 matrix [R | t].
    let t = |m: usize, n: usize| -> f64 {
        if n == 4 {
            t_cg.translation[m - 1]
        } else {
            t_cg.rotation[(m - 1, n - 1)]
        }
    };
    PlaneCoefficients {
        k1: t(1, 1) * (t(2, 2) * t(3, 4) - t(2, 4) * t(3, 2))
            + t(1, 2) * (t(2, 4) * t(3, 1) - t(2, 1) * t(3, 4))
            + t(1, 4) * (t(2, 1) * t(3, 2) - t(2, 2) * t(3, 1)),
        k2: t(1, 1) * t(2, 2) - t(1, 2) * t(2, 1),
        k3: t(2, 1) * t(3, 2) - t(2, 2) * t(3, 1),
        k4: t(1, 2) * t(3, 1) - t(1, 1) * t(3, 2),
    }
}

/// Depth along the optical axis of the ground point seen at `(px, py)`.
pub fn depth_from_normalized(
    coeffs: &PlaneCoefficients,
    px: f64,
    py: f64,
    max_range: f64,
) -> Result<f64, DepthError> {
    let den = coeffs.k2 + coeffs.k3 * px + coeffs.k4 * py;
    if den.abs() < DEGENERATE_DENOMINATOR {
        return Err(DepthError::DegenerateRay(den));
    }
    let depth = coeffs.k1 / den;
    if !(depth > 0.0) {
        return Err(DepthError::NegativeDepth(depth));
    }
    if depth > max_range {
        return Err(DepthError::OutOfRange { depth, max_range });
    }
    Ok(depth)
}

/// Standard deviation in pixels for a feature detected at pyramid `level`.
pub fn pixel_sigma_for_level(base: f64, level: u8) -> f64 {
    base * f64::from(1u32 << level.min(16))
}

/// A metric 3D landmark estimate in a camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint3D {
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub descriptor: Vec<f64>,
    pub source_pixel: Vector2<f64>,
}

/// Caches the per-model quantities needed to back-project many observations.
#[derive(Debug, Clone, Copy)]
pub struct Backprojector<'a> {
    model: &'a GroundModel,
    k: &'a CameraIntrinsics,
    coeffs: PlaneCoefficients,
    ad_cv: Matrix6<f64>,
}

impl<'a> Backprojector<'a> {
    pub fn new(model: &'a GroundModel, k: &'a CameraIntrinsics) -> Self {
        Self {
            model,
            k,
            coeffs: model.coefficients(),
            ad_cv: model.t_cv.adjoint(),
        }
    }

    pub fn coefficients(&self) -> &PlaneCoefficients {
        &self.coeffs
    }

    pub fn point(&self, u: f64, v: f64) -> Result<Vector3<f64>, DepthError> {
        if !self.k.contains(u, v) {
            return Err(DepthError::OutsideImage(u, v));
        }
        let (px, py) = self.k.normalize(u, v);
        let depth = depth_from_normalized(&self.coeffs, px, py, self.model.max_range)?;
        Ok(Vector3::new(depth * px, depth * py, depth))
    }

    pub fn pixel_jacobian_at(&self, point: &Vector3<f64>) -> Matrix3x2<f64> {
        pixel_jacobian(&self.coeffs, self.k, point)
    }

    pub fn ground_pose_jacobian_at(&self, point: &Vector3<f64>) -> Matrix3x6<f64> {
        let mut left = Matrix3x6::zeros();
        left.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        left.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(point)));
        left * self.ad_cv
    }

    pub fn backproject(&self, obs: &PixelObservation) -> Result<Keypoint3D, DepthError> {
        let position = self.point(obs.u, obs.v)?;
        let g_pix = self.pixel_jacobian_at(&position);
        let g_pose = self.ground_pose_jacobian_at(&position);
        let r_pix = Matrix2::new(obs.sigma_u * obs.sigma_u, 0.0, 0.0, obs.sigma_v * obs.sigma_v);
        let q = g_pix * r_pix * g_pix.transpose()
            + g_pose * self.model.t_vg.covariance * g_pose.transpose();
        Ok(Keypoint3D {
            position,
            covariance: (q + q.transpose()) * 0.5,
            descriptor: obs.descriptor.clone(),
            source_pixel: Vector2::new(obs.u, obs.v),
        })
    }
}

/// d(point)/d(u, v) for a point produced by the depth formula.
///
/// Differentiating `depth = k1 / (k2 + k3 px + k4 py)` gives
/// `d depth / d px = -depth^2 k3 / k1`, so the coupling terms carry a minus sign.
fn pixel_jacobian(c: &PlaneCoefficients, k: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix3x2<f64> {
    if c.k1 == 0.0 {
        return Matrix3x2::zeros();
    }
    let s = p.z / c.k1;
    Matrix3x2::new(
        (c.k1 - c.k3 * p.x) / k.fu,
        -c.k4 * p.x / k.fv,
        -c.k3 * p.y / k.fu,
        (c.k1 - c.k4 * p.y) / k.fv,
        -c.k3 * p.z / k.fu,
        -c.k4 * p.z / k.fv,
    ) * s
}

pub fn backproject(
    model: &GroundModel,
    k: &CameraIntrinsics,
    obs: &PixelObservation,
) -> Result<Keypoint3D, DepthError> {
    Backprojector::new(model, k).backproject(obs)
}

pub fn jacobian_wrt_pixel(
    model: &GroundModel,
    k: &CameraIntrinsics,
    obs: &PixelObservation,
) -> Result<Matrix3x2<f64>, DepthError> {
    let bp = Backprojector::new(model, k);
    let p = bp.point(obs.u, obs.v)?;
    Ok(bp.pixel_jacobian_at(&p))
}

/// `[I | -point^] Ad(T_cv)`: how a camera-frame ground point moves under a
/// left perturbation of `T_vg`, holding its ground-frame coordinates fixed.
pub fn jacobian_wrt_ground_pose(model: &GroundModel, point: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut left = Matrix3x6::zeros();
    left.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    left.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(point)));
    left * model.t_cv.adjoint()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, so3_exp};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 400.0, 256.0, 192.0, 512, 384).unwrap()
    }

    fn reference_rig() -> GroundModel {
        GroundModel::forward_rig(1.0, 47f64.to_radians(), 0.1, 10f64.to_radians(), 10.0).unwrap()
    }

    fn obs(u: f64, v: f64) -> PixelObservation {
        PixelObservation {
            u,
            v,
            sigma_u: 0.5,
            sigma_v: 0.5,
            descriptor: vec![1.0, 0.0],
        }
    }

    /// Independent ray/plane intersection in the ground frame.
    fn ray_plane_oracle(t_cg: &Pose, px: f64, py: f64) -> Option<Vector3<f64>> {
        let t_gc = t_cg.inverse();
        let origin = t_gc.translation;
        let dir = t_gc.rotation * Vector3::new(px, py, 1.0);
        if dir.z.abs() < 1e-15 {
            return None;
        }
        let s = -origin.z / dir.z;
        let hit = origin + dir * s;
        Some(t_cg.transform_point(&hit))
    }

    /// A camera-above-plane pose looking roughly down.
    fn random_camera(rng: &mut impl Rng) -> Pose {
        let phi = Vector3::new(
            std::f64::consts::PI + rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(-3.0..3.0),
        );
        let t_gc = Pose {
            rotation: so3_exp(&Vector3::new(0.0, 0.0, phi.z)) * so3_exp(&Vector3::new(phi.x, phi.y, 0.0)),
            translation: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.3..3.0)),
        };
        t_gc.inverse()
    }

    #[test]
    fn nadir_camera_depth_equals_height() {
        let h = 1.7;
        let t_gc = Pose {
            rotation: so3_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)),
            translation: Vector3::new(0.0, 0.0, h),
        };
        let c = plane_coefficients(&t_gc.inverse());
        let d = depth_from_normalized(&c, 0.0, 0.0, 10.0).unwrap();
        assert!((d - h).abs() < 1e-12);
    }

    #[test]
    fn coincident_camera_is_degenerate() {
        let c = plane_coefficients(&Pose::identity());
        assert_eq!(c.k1, 0.0);
        // Every ray starts on the plane: zero depth, rejected.
        for (px, py) in [(0.0, 0.0), (0.3, 0.2), (-0.5, 0.1)] {
            assert_eq!(depth_from_normalized(&c, px, py, 10.0), Err(DepthError::NegativeDepth(0.0)));
        }
    }

    #[test]
    fn reference_rig_optical_axis_depth() {
        let rig = reference_rig();
        let d = depth_from_normalized(&rig.coefficients(), 0.0, 0.0, 10.0).unwrap();
        let oracle = 1.0 / 47f64.to_radians().sin();
        assert!((d - oracle).abs() < 1e-12);
        assert!((d - 1.3673).abs() < 1e-4);
        let hit = ray_plane_oracle(&rig.t_cg(), 0.0, 0.0).unwrap();
        assert!((hit.z - d).abs() < 1e-12);
    }

    #[test]
    fn horizon_ray_is_degenerate() {
        let rig = reference_rig();
        // Elevation zero: 47 degrees above the optical axis in the image.
        let py = -(47f64.to_radians()).tan();
        let r = depth_from_normalized(&rig.coefficients(), 0.0, py, 10.0);
        assert!(matches!(r, Err(DepthError::DegenerateRay(_))), "{r:?}");
        let above = depth_from_normalized(&rig.coefficients(), 0.0, py - 0.1, 1e6);
        assert!(matches!(above, Err(DepthError::NegativeDepth(_))));
        let near = depth_from_normalized(&rig.coefficients(), 0.0, py + 1e-3, 10.0);
        assert!(matches!(near, Err(DepthError::OutOfRange { .. })));
    }

    #[test]
    fn depth_matches_ray_plane_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut checked = 0;
        for _ in 0..20_000 {
            let t_cg = random_camera(&mut rng);
            let px = rng.random_range(-0.7..0.7);
            let py = rng.random_range(-0.7..0.7);
            let c = plane_coefficients(&t_cg);
            let (Ok(d), Some(hit)) = (depth_from_normalized(&c, px, py, 1e3), ray_plane_oracle(&t_cg, px, py)) else {
                continue;
            };
            let p = Vector3::new(d * px, d * py, d);
            assert!((p - hit).norm() / hit.norm() < 1e-9);
            checked += 1;
        }
        assert!(checked > 10_000);
    }

    #[test]
    fn nadir_backprojection_of_principal_point() {
        let t_vc = Pose {
            rotation: so3_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)),
            translation: Vector3::new(0.0, 0.0, 1.0),
        };
        let model = GroundModel::new(t_vc.inverse(), PoseGaussian::identity(), 10.0).unwrap();
        let kp = backproject(&model, &intrinsics(), &obs(256.0, 192.0)).unwrap();
        assert!((kp.position - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(kp.descriptor, vec![1.0, 0.0]);
    }

    #[test]
    fn nadir_pixel_jacobian_is_rotation_symmetric() {
        let t_vc = Pose {
            rotation: so3_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)),
            translation: Vector3::new(0.0, 0.0, 1.3),
        };
        let model = GroundModel::new(t_vc.inverse(), PoseGaussian::identity(), 10.0).unwrap();
        let j = jacobian_wrt_pixel(&model, &intrinsics(), &obs(256.0, 192.0)).unwrap();
        // Rotating the image by 90 degrees swaps (u, v) -> (-v, u) and the
        // scene x/y the same way, so J must commute with that rotation.
        let rot2 = Matrix2::new(0.0, -1.0, 1.0, 0.0);
        let rot3 = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let lhs = rot3 * j;
        let rhs = j * rot2;
        assert!((lhs - rhs).abs().max() < 1e-15);
        assert!((j[(0, 0)] - j[(1, 1)]).abs() < 1e-15);
    }

    #[test]
    fn pixel_jacobian_vanishes_as_camera_touches_plane() {
        let mut prev = f64::INFINITY;
        for h in [1.0, 1e-2, 1e-4, 1e-6] {
            let model = GroundModel::forward_rig(h, 47f64.to_radians(), 0.1, 0.1, 10.0).unwrap();
            let j = jacobian_wrt_pixel(&model, &intrinsics(), &obs(300.0, 250.0)).unwrap();
            let n = j.norm();
            assert!(n < prev);
            prev = n;
        }
        assert!(prev < 1e-8);
        let c = PlaneCoefficients { k1: 0.0, k2: 1.0, k3: 0.1, k4: 0.2 };
        assert_eq!(pixel_jacobian(&c, &intrinsics(), &Vector3::zeros()), Matrix3x2::zeros());
    }

    #[test]
    fn pixel_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = intrinsics();
        let mut checked = 0;
        while checked < 1000 {
            let t_cg = random_camera(&mut rng);
            let model = GroundModel::new(t_cg, PoseGaussian::identity(), 50.0).unwrap();
            let u = rng.random_range(20.0..490.0);
            let v = rng.random_range(20.0..360.0);
            let bp = model.backprojector(&k);
            let Ok(p) = bp.point(u, v) else { continue };
            if p.z > model.max_range / 2.0 {
                continue;
            }
            let h = 1e-4;
            let (Ok(pu1), Ok(pu0), Ok(pv1), Ok(pv0)) =
                (bp.point(u + h, v), bp.point(u - h, v), bp.point(u, v + h), bp.point(u, v - h))
            else {
                continue;
            };
            let fd = Matrix3x2::from_columns(&[(pu1 - pu0) / (2.0 * h), (pv1 - pv0) / (2.0 * h)]);
            let j = bp.pixel_jacobian_at(&p);
            assert!((j - fd).norm() / fd.norm() < 1e-5, "{j} vs {fd}");
            checked += 1;
        }
    }

    #[test]
    fn ground_pose_jacobian_special_cases() {
        let ident = GroundModel { t_cv: Pose::identity(), t_vg: PoseGaussian::identity(), max_range: 10.0 };
        let p = Vector3::new(0.3, -0.4, 2.0);
        let j = jacobian_wrt_ground_pose(&ident, &p);
        assert_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::identity());
        assert_eq!(j.fixed_view::<3, 3>(0, 3).into_owned(), -skew(&p));
        let j0 = jacobian_wrt_ground_pose(&ident, &Vector3::zeros());
        assert_eq!(j0.fixed_view::<3, 3>(0, 3).into_owned(), Matrix3::zeros());
    }

    #[test]
    fn ground_pose_jacobian_matches_finite_perturbation() {
        // Perturb T_vg on the left and carry the fixed ground-frame point
        // through the perturbed chain T_cv * exp(xi) * T_vg.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = intrinsics();
        for _ in 0..1000 {
            let model = GroundModel {
                t_vg: PoseGaussian::exact(Pose::exp(&Vector6::from_fn(|i, _| {
                    rng.random_range(-0.05..0.05) * if i < 3 { 1.0 } else { 0.5 }
                }))),
                ..reference_rig()
            };
            let u = rng.random_range(0.0..511.0);
            let v = rng.random_range(0.0..383.0);
            let bp = model.backprojector(&k);
            let Ok(p) = bp.point(u, v) else { continue };
            let ground_pt = model.t_cg().inverse().transform_point(&p);
            let j = jacobian_wrt_ground_pose(&model, &p);
            let h = 1e-6;
            let mut fd = Matrix3x6::zeros();
            for i in 0..6 {
                let mut xi = Vector6::zeros();
                xi[i] = h;
                let plus = model.t_cv.compose(&Pose::exp(&xi)).compose(&model.t_vg.mean);
                let minus = model.t_cv.compose(&Pose::exp(&-xi)).compose(&model.t_vg.mean);
                let col = (plus.transform_point(&ground_pt) - minus.transform_point(&ground_pt)) / (2.0 * h);
                fd.set_column(i, &col);
            }
            assert!((j - fd).norm() / fd.norm() < 1e-5);
        }
    }

    #[test]
    fn reprojection_and_plane_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = intrinsics();
        let model = reference_rig();
        let t_gc = model.t_cg().inverse();
        for _ in 0..2000 {
            let o = obs(rng.random_range(0.0..511.9), rng.random_range(0.0..383.9));
            let kp = backproject(&model, &k, &o).unwrap();
            let uv = project(&k, &kp.position).unwrap();
            assert!((uv.x - o.u).abs() < 1e-9 && (uv.y - o.v).abs() < 1e-9);
            assert!(t_gc.transform_point(&kp.position).z.abs() < 1e-9);
            let eig = kp.covariance.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-12);
            assert!(kp.position.z > 0.0 && kp.position.z <= model.max_range);
        }
    }

    #[test]
    fn covariance_grows_along_the_centre_column() {
        let k = intrinsics();
        let model = reference_rig();
        let mut last = 0.0;
        let mut last_range = 0.0;
        // bottom of the image is nearest the vehicle
        for step in 0..=38 {
            let v = 383.0 - step as f64 * 10.0;
            let kp = backproject(&model, &k, &obs(256.0, v)).unwrap();
            let ground_range = model.t_cg().inverse().transform_point(&kp.position).xy().norm();
            let tr = kp.covariance.trace();
            assert!(tr > last && ground_range > last_range);
            last = tr;
            last_range = ground_range;
        }
    }

    #[test]
    fn outside_image_rejected() {
        let r = backproject(&reference_rig(), &intrinsics(), &obs(-1.0, 10.0));
        assert!(matches!(r, Err(DepthError::OutsideImage(..))));
    }

    #[test]
    fn camera_must_be_above_ground() {
        let below = camera_mount(-0.5, 0.8, 0.0).inverse();
        assert!(GroundModel::new(below, PoseGaussian::identity(), 10.0).is_err());
        assert!(GroundModel::forward_rig(1.0, 0.8, 0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn pixel_sigma_doubles_per_level() {
        assert_eq!(pixel_sigma_for_level(0.5, 0), 0.5);
        assert_eq!(pixel_sigma_for_level(0.5, 3), 4.0);
    }
}
