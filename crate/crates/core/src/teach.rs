//! Teach pass: a chain of keyframes joined by relative pose estimates.
//!
//! Keypoints stay in their own keyframe's camera frame; nothing is ever
//! expressed in a global frame. Edge `k` stores `T_{c_k, c_{k+1}}` and the
//! inlier correspondences behind it.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimation::{chain_vo, refine_pose, EstimationError, GaussNewtonConfig};
use crate::format::{decode, encode, write_atomic, BodyReader, BodyWriter, FormatError};
use crate::geometry::{Pose, PoseGaussian};
use crate::ground::{Keypoint3D, Rig};
use crate::matching::{match_keypoints_gated, Match, MatchConfig};
use crate::ransac::{ransac_pose, RansacConfig, RansacError};

pub const MAP_MAGIC: &[u8; 8] = b"MVTRMAP\0";
pub const MAP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeThresholds {
    /// metres
    pub translation: f64,
    /// degrees
    pub rotation_deg: f64,
}

impl Default for KeyframeThresholds {
    fn default() -> Self {
        Self {
            translation: 0.25,
            rotation_deg: 2.5,
        }
    }
}

/// True once the motion since the last keyframe reaches either threshold.
pub fn should_create_keyframe(delta: &Pose, thresholds: &KeyframeThresholds) -> bool {
    delta.translation.norm() >= thresholds.translation
        || delta.rotation_angle() >= thresholds.rotation_deg.to_radians()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: usize,
    /// In this keyframe's camera frame.
    pub keypoints: Vec<Keypoint3D>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEdge {
    pub from_id: usize,
    pub to_id: usize,
    /// `T_{c_from, c_to}`.
    pub transform: PoseGaussian,
    /// `index_a` refers to `from_id`'s keypoints, `index_b` to `to_id`'s.
    pub matches: Vec<Match>,
}

#[derive(Debug, Error)]
pub enum PathError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid path: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaughtPath {
    pub keyframes: Vec<Keyframe>,
    pub edges: Vec<PathEdge>,
    pub rig: Rig,
    pub fingerprint: String,
}

/// Hex SHA-256 of the rig's canonical JSON form.
pub fn rig_fingerprint(rig: &Rig) -> String {
    let json = serde_json::to_vec(rig).expect("rig serialises");
    Sha256::digest(&json).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl TaughtPath {
    pub fn validate(&self) -> Result<(), PathError> {
        if self.keyframes.is_empty() {
            return Err(PathError::Invalid("no keyframes".into()));
        }
        if self.edges.len() + 1 != self.keyframes.len() {
            return Err(PathError::Invalid(format!(
                "{} keyframes but {} edges",
                self.keyframes.len(),
                self.edges.len()
            )));
        }
        for (i, k) in self.keyframes.iter().enumerate() {
            if k.id != i {
                return Err(PathError::Invalid(format!("keyframe {i} has id {}", k.id)));
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.from_id != i || e.to_id != i + 1 {
                return Err(PathError::Invalid(format!("edge {i} joins {} -> {}", e.from_id, e.to_id)));
            }
            let (na, nb) = (self.keyframes[i].keypoints.len(), self.keyframes[i + 1].keypoints.len());
            if e.matches.iter().any(|m| m.index_a >= na || m.index_b >= nb) {
                return Err(PathError::Invalid(format!("edge {i} references missing keypoints")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    /// `T_{c_from, c_to}` compounded along the chain, in either direction.
    pub fn relative(&self, from: usize, to: usize) -> PoseGaussian {
        let mut acc = PoseGaussian::identity();
        if to >= from {
            for e in &self.edges[from..to] {
                acc = chain_vo(&acc, &e.transform);
            }
        } else {
            for e in self.edges[to..from].iter().rev() {
                acc = chain_vo(&acc, &e.transform.inverse());
            }
        }
        acc
    }

    /// Camera pose of every keyframe relative to keyframe 0.
    pub fn reconstruct(&self) -> Vec<Pose> {
        let mut poses = vec![Pose::identity()];
        for e in &self.edges {
            let last = poses[poses.len() - 1];
            poses.push(last.compose(&e.transform.mean));
        }
        poses
    }

    /// Converts a camera-frame relative pose to the vehicle frames.
    pub fn to_vehicle(&self, t_cc: &Pose) -> Pose {
        self.rig.ground.t_cv.inverse().compose(t_cc).compose(&self.rig.ground.t_cv)
    }

    /// Sum of edge translation lengths.
    pub fn length(&self) -> f64 {
        self.edges.iter().map(|e| e.transform.mean.translation.norm()).sum()
    }

    pub fn metadata(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map format version {MAP_VERSION}");
        let _ = writeln!(s, "rig fingerprint {}", self.fingerprint);
        let _ = writeln!(s, "keyframes {}", self.keyframes.len());
        let _ = writeln!(s, "edges {}", self.edges.len());
        let _ = writeln!(s, "path length {:.3} m", self.length());
        let _ = writeln!(s, "id\ttime_s\tkeypoints\tedge_m\tedge_deg\tinliers");
        for k in &self.keyframes {
            let (m, deg, inl) = match self.edges.get(k.id) {
                Some(e) => (
                    format!("{:.4}", e.transform.mean.translation.norm()),
                    format!("{:.3}", e.transform.mean.rotation_angle().to_degrees()),
                    e.matches.len().to_string(),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(s, "{}\t{:.3}\t{}\t{m}\t{deg}\t{inl}", k.id, k.timestamp, k.keypoints.len());
        }
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MapHeader {
    rig: Rig,
    fingerprint: String,
    keyframe_count: usize,
    edge_count: usize,
}

fn put_keypoint(w: &mut BodyWriter, k: &Keypoint3D) {
    w.f64s(k.position.iter());
    w.f64s(k.covariance.iter());
    w.f64s(k.source_pixel.iter());
    w.u64(k.descriptor.len() as u64);
    w.f64s(k.descriptor.iter());
}

fn get_keypoint(r: &mut BodyReader<'_>) -> Result<Keypoint3D, FormatError> {
    let mut p = [0.0; 3];
    let mut c = [0.0; 9];
    let mut px = [0.0; 2];
    r.f64s(&mut p)?;
    r.f64s(&mut c)?;
    r.f64s(&mut px)?;
    let n = r.usize()?;
    r.expect_at_least(n, 8)?;
    let mut descriptor = vec![0.0; n];
    r.f64s(&mut descriptor)?;
    Ok(Keypoint3D {
        position: Vector3::from_column_slice(&p),
        covariance: Matrix3::from_column_slice(&c),
        descriptor,
        source_pixel: Vector2::from_column_slice(&px),
    })
}

pub fn encode_path(path: &TaughtPath) -> Vec<u8> {
    let header = serde_json::to_vec(&MapHeader {
        rig: path.rig,
        fingerprint: path.fingerprint.clone(),
        keyframe_count: path.keyframes.len(),
        edge_count: path.edges.len(),
    })
    .expect("header serialises");
    let mut w = BodyWriter::default();
    for k in &path.keyframes {
        w.u64(k.id as u64);
        w.f64(k.timestamp);
        w.u64(k.keypoints.len() as u64);
        for kp in &k.keypoints {
            put_keypoint(&mut w, kp);
        }
    }
    for e in &path.edges {
        w.u64(e.from_id as u64);
        w.u64(e.to_id as u64);
        w.f64s(e.transform.mean.rotation.iter());
        w.f64s(e.transform.mean.translation.iter());
        w.f64s(e.transform.covariance.iter());
        w.u64(e.matches.len() as u64);
        for m in &e.matches {
            w.u64(m.index_a as u64);
            w.u64(m.index_b as u64);
            w.f64(m.descriptor_distance);
            w.f64(m.mahalanobis);
        }
    }
    encode(MAP_MAGIC, MAP_VERSION, &header, &w.bytes)
}

pub fn decode_path(bytes: &[u8]) -> Result<TaughtPath, PathError> {
    let (header, body) = decode(bytes, MAP_MAGIC, MAP_VERSION)?;
    let header: MapHeader = serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut r = BodyReader::new(body);
    r.expect_at_least(header.keyframe_count, 24)?;
    let mut keyframes = Vec::with_capacity(header.keyframe_count);
    for _ in 0..header.keyframe_count {
        let id = r.usize()?;
        let timestamp = r.f64()?;
        let n = r.usize()?;
        r.expect_at_least(n, 8 * 15)?;
        let keypoints = (0..n).map(|_| get_keypoint(&mut r)).collect::<Result<_, _>>()?;
        keyframes.push(Keyframe {
            id,
            keypoints,
            timestamp,
        });
    }
    r.expect_at_least(header.edge_count, 8 * 51)?;
    let mut edges = Vec::with_capacity(header.edge_count);
    for _ in 0..header.edge_count {
        let from_id = r.usize()?;
        let to_id = r.usize()?;
        let mut rot = [0.0; 9];
        let mut t = [0.0; 3];
        let mut cov = [0.0; 36];
        r.f64s(&mut rot)?;
        r.f64s(&mut t)?;
        r.f64s(&mut cov)?;
        let n = r.usize()?;
        r.expect_at_least(n, 32)?;
        let mut matches = Vec::with_capacity(n);
        for _ in 0..n {
            matches.push(Match {
                index_a: r.usize()?,
                index_b: r.usize()?,
                descriptor_distance: r.f64()?,
                mahalanobis: r.f64()?,
            });
        }
        edges.push(PathEdge {
            from_id,
            to_id,
            transform: PoseGaussian {
                mean: Pose {
                    rotation: Matrix3::from_column_slice(&rot),
                    translation: Vector3::from_column_slice(&t),
                },
                covariance: Matrix6::from_column_slice(&cov),
            },
            matches,
        });
    }
    r.finish()?;
    let path = TaughtPath {
        keyframes,
        edges,
        rig: header.rig,
        fingerprint: header.fingerprint,
    };
    path.validate()
        .map_err(|e| FormatError::CorruptFile(e.to_string()))?;
    Ok(path)
}

pub fn save_path(path: &TaughtPath, destination: &Path) -> Result<(), PathError> {
    write_atomic(destination, &encode_path(path)).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_path(source: &Path) -> Result<TaughtPath, PathError> {
    let bytes = std::fs::read(source).map_err(FormatError::from)?;
    decode_path(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeachConfig {
    pub thresholds: KeyframeThresholds,
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub gauss_newton: GaussNewtonConfig,
    /// Standard deviations (x, y, z, roll, pitch, yaw; metres and radians)
    /// of the constant-velocity motion prediction used to gate matches.
    pub prediction_sigmas: [f64; 6],
}

impl Default for TeachConfig {
    fn default() -> Self {
        Self {
            thresholds: KeyframeThresholds::default(),
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            gauss_newton: GaussNewtonConfig::default(),
            prediction_sigmas: default_prediction_sigmas(),
        }
    }
}

pub fn default_prediction_sigmas() -> [f64; 6] {
    let r = 2f64.to_radians();
    [0.05, 0.05, 0.05, r, r, r]
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeachError {
    #[error("visual odometry failed at frame {frame}: {reason}")]
    VoFailure { frame: usize, reason: String },
}

/// Result of aligning a frame with a reference keypoint set.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `T_{reference, current}`.
    pub transform: PoseGaussian,
    pub inliers: Vec<Match>,
    pub candidate_matches: usize,
}

/// Match (gated by `prior`) -> RANSAC -> Gauss-Newton.
pub fn align(
    reference: &[Keypoint3D],
    current: &[Keypoint3D],
    prior: &PoseGaussian,
    matching: &MatchConfig,
    ransac: &RansacConfig,
    gauss_newton: &GaussNewtonConfig,
) -> Result<Alignment, AlignError> {
    let matches = match_keypoints_gated(reference, current, prior, matching);
    align_matches(reference, current, &matches, ransac, gauss_newton)
}

pub fn align_matches(
    reference: &[Keypoint3D],
    current: &[Keypoint3D],
    matches: &[Match],
    ransac: &RansacConfig,
    gauss_newton: &GaussNewtonConfig,
) -> Result<Alignment, AlignError> {
    let hypothesis = ransac_pose(matches, reference, current, ransac).map_err(|e| AlignError::Ransac {
        error: e,
        candidates: matches.len(),
    })?;
    let estimate = refine_pose(&hypothesis.inliers, reference, current, &hypothesis.transform, gauss_newton)
        .map_err(AlignError::Estimation)?;
    Ok(Alignment {
        transform: estimate.transform,
        inliers: hypothesis.inliers,
        candidate_matches: matches.len(),
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("{error} ({candidates} candidate matches)")]
    Ransac { error: RansacError, candidates: usize },
    #[error(transparent)]
    Estimation(EstimationError),
}

impl AlignError {
    /// Inliers supporting the best hypothesis, when known.
    pub fn inliers_found(&self) -> usize {
        match self {
            AlignError::Ransac {
                error: RansacError::InsufficientInliers { found, .. },
                ..
            } => *found,
            _ => 0,
        }
    }
}

/// Motion (metres or radians) below which a trailing frame is dropped
/// instead of closing the route.
const FINAL_KEYFRAME_MIN_MOTION: f64 = 1e-3;

/// Streaming teach-pass state: feed one frame of keypoints at a time.
#[derive(Debug, Clone)]
pub struct Teacher {
    config: TeachConfig,
    rig: Rig,
    fingerprint: String,
    keyframes: Vec<Keyframe>,
    edges: Vec<PathEdge>,
    /// `T_{kf, previous frame}` and the last frame-to-frame step.
    since_keyframe: Pose,
    last_step: Pose,
    frames: usize,
    /// Latest frame that did not become a keyframe, kept so the route can
    /// end where the drive ended.
    pending: Option<(Keyframe, Alignment)>,
}

impl Teacher {
    pub fn new(rig: Rig, config: TeachConfig) -> Self {
        Self {
            config,
            fingerprint: rig_fingerprint(&rig),
            rig,
            keyframes: Vec::new(),
            edges: Vec::new(),
            since_keyframe: Pose::identity(),
            last_step: Pose::identity(),
            frames: 0,
            pending: None,
        }
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    /// Processes one frame. Returns the id of a keyframe created by it.
    pub fn teach_step(&mut self, keypoints: Vec<Keypoint3D>, timestamp: f64) -> Result<Option<usize>, TeachError> {
        let frame = self.frames;
        self.frames += 1;
        let Some(last) = self.keyframes.last() else {
            self.keyframes.push(Keyframe {
                id: 0,
                keypoints,
                timestamp,
            });
            return Ok(Some(0));
        };

        let prior = PoseGaussian::with_sigmas(self.since_keyframe.compose(&self.last_step), &self.config.prediction_sigmas);
        let mut ransac = self.config.ransac;
        ransac.seed = ransac.seed.wrapping_add(frame as u64);
        let a = align(
            &last.keypoints,
            &keypoints,
            &prior,
            &self.config.matching,
            &ransac,
            &self.config.gauss_newton,
        )
        .map_err(|e| TeachError::VoFailure {
            frame,
            reason: e.to_string(),
        })?;

        let t = a.transform.mean;
        self.last_step = self.since_keyframe.inverse().compose(&t);
        self.since_keyframe = t;

        let vehicle_delta = self.rig.ground.t_cv.inverse().compose(&t).compose(&self.rig.ground.t_cv);
        let id = self.keyframes.len();
        let keyframe = Keyframe {
            id,
            keypoints,
            timestamp,
        };
        if !should_create_keyframe(&vehicle_delta, &self.config.thresholds) {
            self.pending = Some((keyframe, a));
            return Ok(None);
        }
        self.push_keyframe(keyframe, a);
        Ok(Some(id))
    }

    fn push_keyframe(&mut self, keyframe: Keyframe, a: Alignment) {
        self.edges.push(PathEdge {
            from_id: keyframe.id - 1,
            to_id: keyframe.id,
            transform: a.transform,
            matches: a.inliers,
        });
        self.keyframes.push(keyframe);
        self.since_keyframe = Pose::identity();
        self.pending = None;
    }

    /// Closes the route. The last frame becomes a keyframe unless it
    /// already is one or has not moved from the previous keyframe.
    pub fn finish(mut self) -> TaughtPath {
        if let Some((keyframe, a)) = self.pending.take() {
            if a.transform.mean.translation.norm() > FINAL_KEYFRAME_MIN_MOTION
                || a.transform.mean.rotation_angle() > FINAL_KEYFRAME_MIN_MOTION
            {
                self.push_keyframe(keyframe, a);
            }
        }
        TaughtPath {
            keyframes: self.keyframes,
            edges: self.edges,
            rig: self.rig,
            fingerprint: self.fingerprint,
        }
    }
}
