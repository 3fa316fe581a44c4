//! Run configuration: one TOML file fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::GaussNewtonConfig;
use crate::geometry::CameraIntrinsics;
use crate::ground::{GroundModel, Rig};
use crate::matching::{MatchConfig, CHI2_3DOF_99};
use crate::ransac::RansacConfig;
use crate::repeat::{ControllerGains, LocalizeConfig, StateMachineConfig, CHI2_6DOF_999};
use crate::sim::{NoiseConfig, RenderOptions, Script, Terrain, WorldConfig};
use crate::teach::{default_prediction_sigmas, KeyframeThresholds, TeachConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    /// Depth from the ground-plane model.
    #[default]
    Mono,
    /// True depth with a small fixed covariance, as a stereo stand-in.
    PerfectDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntrinsicsConfig {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for IntrinsicsConfig {
    fn default() -> Self {
        Self {
            fu: 400.0,
            fv: 400.0,
            cu: 256.0,
            cv: 192.0,
            width: 512,
            height: 384,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    /// Camera height above the vehicle footprint, metres.
    pub camera_height: f64,
    /// Downward pitch of the optical axis, degrees.
    pub pitch_deg: f64,
    /// Depths beyond this are rejected, metres.
    pub max_range: f64,
    pub intrinsics: IntrinsicsConfig,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            camera_height: 1.0,
            pitch_deg: 47.0,
            max_range: 10.0,
            intrinsics: IntrinsicsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundConfig {
    pub sigma_translation: f64,
    pub sigma_rotation_deg: f64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            sigma_translation: 0.10,
            sigma_rotation_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub budget: usize,
    /// Level-0 pixel standard deviation assumed by the depth model.
    pub pixel_sigma: f64,
    pub max_descriptor_distance: f64,
    pub gate_chi2: f64,
    /// Landmarks beyond this distance are not rendered, metres.
    pub render_distance: f64,
    /// Standard deviation assigned to perfect-depth points, metres.
    pub perfect_depth_sigma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            budget: 600,
            pixel_sigma: 0.5,
            max_descriptor_distance: 0.4,
            gate_chi2: CHI2_3DOF_99,
            render_distance: 8.0,
            perfect_depth_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationConfig {
    /// Fewer inliers than this is a localization failure.
    pub min_matches: usize,
    /// Keyframes fused into each local map.
    pub window_size: usize,
    /// Unlocalized distance before stopping to search, metres.
    pub halt_distance: f64,
    /// Seconds spent stopped in search before the operator drives.
    pub search_timeout: f64,
    /// Operator distance after which the traverse is abandoned, metres.
    pub max_intervention: f64,
    /// Metres per radian of yaw difference in the nearest-keyframe metric.
    pub heading_weight: f64,
    /// Squared Mahalanobis bound on a localization's disagreement with the
    /// predicted pose.
    pub prior_gate: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            min_matches: 10,
            window_size: 5,
            halt_distance: 2.0,
            search_timeout: 2.0,
            max_intervention: 10.0,
            heading_weight: 0.5,
            prior_gate: CHI2_6DOF_999,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacSection {
    pub max_iterations: usize,
    pub confidence: f64,
    pub inlier_chi2: f64,
}

impl Default for RansacSection {
    fn default() -> Self {
        let d = RansacConfig::default();
        Self {
            max_iterations: d.max_iterations,
            confidence: d.confidence,
            inlier_chi2: d.inlier_chi2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussNewtonSection {
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub damping: f64,
}

impl Default for GaussNewtonSection {
    fn default() -> Self {
        let d = GaussNewtonConfig::default();
        Self {
            max_iterations: d.max_iterations,
            convergence_tol: d.convergence_tol,
            damping: d.damping,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepeatConfig {
    /// Autonomous driving speed, m/s.
    pub speed: f64,
    /// Keyframe the vehicle is placed at to start.
    pub start_keyframe: usize,
    /// Keyframe to stop at; the last one when absent.
    pub destination: Option<usize>,
    /// Seconds; scaled from the route length when absent.
    pub time_limit: Option<f64>,
    /// Operator driving speed during interventions, m/s.
    pub operator_speed: f64,
    /// Relative standard deviation of wheel-odometry distance.
    pub odometry_scale_sigma: f64,
    /// Standard deviation of wheel-odometry heading change per metre, rad/m.
    pub odometry_yaw_sigma: f64,
    pub controller: ControllerGains,
}

impl Default for RepeatConfig {
    fn default() -> Self {
        Self {
            speed: 0.6,
            start_keyframe: 0,
            destination: None,
            time_limit: None,
            operator_speed: 0.5,
            odometry_scale_sigma: 0.02,
            odometry_yaw_sigma: 0.02,
            controller: ControllerGains::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub depth: DepthSource,
    pub rig: RigConfig,
    pub ground: GroundConfig,
    pub keyframe: KeyframeThresholds,
    pub features: FeatureConfig,
    pub localization: LocalizationConfig,
    pub ransac: RansacSection,
    pub gauss_newton: GaussNewtonSection,
    pub noise: NoiseConfig,
    pub world: WorldConfig,
    pub terrain: Terrain,
    pub script: Script,
    pub repeat: RepeatConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            depth: DepthSource::Mono,
            rig: RigConfig::default(),
            ground: GroundConfig::default(),
            keyframe: KeyframeThresholds::default(),
            features: FeatureConfig::default(),
            localization: LocalizationConfig::default(),
            ransac: RansacSection::default(),
            gauss_newton: GaussNewtonSection::default(),
            noise: NoiseConfig::default(),
            world: WorldConfig::default(),
            terrain: Terrain::Plane,
            script: Script::default(),
            repeat: RepeatConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn rig(&self) -> Result<Rig, ConfigError> {
        let r = &self.rig;
        let ground = GroundModel::forward_rig(
            r.camera_height,
            r.pitch_deg.to_radians(),
            self.ground.sigma_translation,
            self.ground.sigma_rotation_deg.to_radians(),
            r.max_range,
        )
        .map_err(|e| ConfigError::Invalid(format!("rig: {e}")))?;
        let i = &r.intrinsics;
        let intrinsics = CameraIntrinsics::new(i.fu, i.fv, i.cu, i.cv, i.width, i.height)
            .map_err(|e| ConfigError::Invalid(format!("rig.intrinsics: {e}")))?;
        Ok(Rig { ground, intrinsics })
    }

    pub fn matching(&self) -> MatchConfig {
        MatchConfig {
            max_descriptor_distance: self.features.max_descriptor_distance,
            gate_chi2: self.features.gate_chi2,
        }
    }

    pub fn ransac_config(&self) -> RansacConfig {
        RansacConfig {
            max_iterations: self.ransac.max_iterations,
            inlier_chi2: self.ransac.inlier_chi2,
            min_inliers: self.localization.min_matches,
            confidence: self.ransac.confidence,
            seed: self.seed,
        }
    }

    pub fn gauss_newton_config(&self) -> GaussNewtonConfig {
        GaussNewtonConfig {
            max_iterations: self.gauss_newton.max_iterations,
            convergence_tol: self.gauss_newton.convergence_tol,
            damping: self.gauss_newton.damping,
        }
    }

    pub fn teach_config(&self) -> TeachConfig {
        TeachConfig {
            thresholds: self.keyframe,
            matching: self.matching(),
            ransac: self.ransac_config(),
            gauss_newton: self.gauss_newton_config(),
            prediction_sigmas: default_prediction_sigmas(),
        }
    }

    pub fn localize_config(&self) -> LocalizeConfig {
        LocalizeConfig {
            matching: self.matching(),
            ransac: self.ransac_config(),
            gauss_newton: self.gauss_newton_config(),
            prior_gate: self.localization.prior_gate,
        }
    }

    pub fn state_machine(&self) -> StateMachineConfig {
        StateMachineConfig {
            halt_distance: self.localization.halt_distance,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            budget: self.features.budget,
            reported_pixel_sigma: self.features.pixel_sigma,
            max_distance: self.features.render_distance,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.rig()?;
        if !(self.keyframe.translation > 0.0 && self.keyframe.rotation_deg > 0.0) {
            return bad("keyframe thresholds must be positive");
        }
        if self.features.budget == 0 {
            return bad("features.budget must be positive");
        }
        if !(self.features.pixel_sigma > 0.0) {
            return bad("features.pixel_sigma must be positive");
        }
        if !(self.features.max_descriptor_distance > 0.0 && self.features.gate_chi2 > 0.0) {
            return bad("features.max_descriptor_distance and features.gate_chi2 must be positive");
        }
        if !(self.features.perfect_depth_sigma > 0.0) {
            return bad("features.perfect_depth_sigma must be positive");
        }
        if self.localization.min_matches < 3 {
            return bad("localization.min_matches must be at least 3");
        }
        if self.localization.window_size == 0 {
            return bad("localization.window_size must be positive");
        }
        if !(self.localization.halt_distance > 0.0 && self.localization.search_timeout >= 0.0) {
            return bad("localization.halt_distance must be positive");
        }
        if !(self.localization.prior_gate > 0.0) {
            return bad("localization.prior_gate must be positive");
        }
        if self.ransac.max_iterations == 0 || !(self.ransac.confidence > 0.0 && self.ransac.confidence < 1.0) {
            return bad("ransac.max_iterations must be positive and ransac.confidence in (0, 1)");
        }
        self.gauss_newton_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.noise.validate().map_err(|e| ConfigError::Invalid(format!("noise: {e}")))?;
        if !(self.world.density > 0.0) {
            return bad("world.density must be positive");
        }
        if !(self.repeat.speed > 0.0 && self.repeat.operator_speed > 0.0) {
            return bad("repeat speeds must be positive");
        }
        self.script
            .plan()
            .map_err(|e| ConfigError::Invalid(format!("script: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Region, Waypoint};

    #[test]
    fn defaults_match_reference_rig() {
        let c = RunConfig::default();
        assert_eq!(c.rig.camera_height, 1.0);
        assert_eq!(c.rig.pitch_deg, 47.0);
        assert_eq!((c.rig.intrinsics.width, c.rig.intrinsics.height), (512, 384));
        assert_eq!(c.ground.sigma_translation, 0.10);
        assert_eq!(c.ground.sigma_rotation_deg, 10.0);
        assert_eq!(c.keyframe.translation, 0.25);
        assert_eq!(c.keyframe.rotation_deg, 2.5);
        assert_eq!(c.features.budget, 600);
        assert_eq!(c.localization.min_matches, 10);
        assert_eq!(c.script.frame_rate, 15.0);
        assert_eq!(c.repeat.speed, 0.6);
        let rig = c.rig().unwrap();
        assert!((rig.ground.camera_height() - 1.0).abs() < 1e-12);
        assert_eq!(rig, Rig::default());
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.terrain = Terrain::dome(0.15, 50.0);
        c.seed = 99;
        c.depth = DepthSource::PerfectDepth;
        c.repeat.destination = Some(12);
        c.script.waypoints.push(Waypoint {
            x: 10.0,
            y: 3.0,
            heading_deg: Some(0.1 + 0.2),
        });
        c.world.dropout_regions.push(crate::sim::DropoutRegion {
            region: Region {
                x_min: 1.0,
                x_max: 2.0,
                y_min: -1.0,
                y_max: 1.0,
                blend: 0.0,
            },
            rate: 0.9,
        });
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[rig]\ncamera_hieght = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("camera_hieght"), "{msg}");
        let err = RunConfig::from_toml("[features]\nbudget = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("budget"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[keyframe]\ntranslation = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[noise]\ndropout_rate = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[rig]\ncamera_height = -1.0\n").is_err());
    }
}
