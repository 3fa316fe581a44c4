//! Repeat pass: windowed landmark fusion around the nearest keyframe,
//! localization against the fused map, path-relative errors, and the
//! fallback state machine used when localization fails.

use std::collections::HashMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::GaussNewtonConfig;
use crate::format::write_atomic;
use crate::geometry::{skew, Pose, PoseGaussian};
use crate::ground::Keypoint3D;
use crate::matching::{match_keypoints, Match, MatchConfig};
use crate::ransac::RansacConfig;
use crate::sim::Command;
use crate::teach::{align, align_matches, Alignment, TaughtPath};

/// Landmarks from a window of keyframes, expressed in the anchor's camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMap {
    pub anchor_id: usize,
    pub window: Vec<usize>,
    pub fused_keypoints: Vec<Keypoint3D>,
    /// (keyframe, keypoint index) observations behind each fused keypoint.
    pub sources: Vec<Vec<(usize, usize)>>,
}

/// Keyframe ids in the window around `anchor`: `(w - 1) / 2` behind and
/// `w / 2` ahead, clipped to the path.
pub fn window_ids(path_len: usize, anchor: usize, window_size: usize) -> Vec<usize> {
    let w = window_size.max(1);
    let lo = anchor.saturating_sub((w - 1) / 2);
    let hi = (anchor + w / 2).min(path_len - 1);
    (lo..=hi).collect()
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Keeps the smaller root so representatives are stable.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Moves a keypoint through an uncertain transform, first order in both.
pub fn transform_keypoint(t: &PoseGaussian, k: &Keypoint3D) -> Keypoint3D {
    let r = t.mean.rotation;
    let p = t.mean.transform_point(&k.position);
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&p)));
    let q = r * k.covariance * r.transpose() + j * t.covariance * j.transpose();
    Keypoint3D {
        position: p,
        covariance: (q + q.transpose()) * 0.5,
        descriptor: k.descriptor.clone(),
        source_pixel: k.source_pixel,
    }
}

/// True when `big - small` is positive semi-definite, up to round-off.
pub fn loewner_le(small: &Matrix3<f64>, big: &Matrix3<f64>) -> bool {
    let d = big - small;
    let eig = SymmetricEigen::new((d + d.transpose()) * 0.5);
    eig.eigenvalues.min() >= -1e-9 * big.norm().max(1e-300)
}

pub fn build_local_map(path: &TaughtPath, anchor_id: usize, window_size: usize) -> LocalMap {
    let window = window_ids(path.len(), anchor_id, window_size);
    let first = window[0];

    // node numbering: keyframe by keyframe, keypoint by keypoint
    let mut offsets = Vec::with_capacity(window.len() + 1);
    let mut total = 0;
    for &k in &window {
        offsets.push(total);
        total += path.keyframes[k].keypoints.len();
    }
    offsets.push(total);
    let node = |k: usize, i: usize| offsets[k - first] + i;

    let mut sets = DisjointSet::new(total);
    for &k in &window[..window.len() - 1] {
        for m in &path.edges[k].matches {
            sets.union(node(k, m.index_a), node(k + 1, m.index_b));
        }
    }

    let transforms: Vec<PoseGaussian> = window.iter().map(|&k| path.relative(anchor_id, k)).collect();
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut group_of_root: HashMap<usize, usize> = HashMap::new();
    // anchor observations first so a window of one reproduces the keyframe
    let order = std::iter::once(anchor_id).chain(window.iter().copied().filter(|&k| k != anchor_id));
    for k in order {
        for i in 0..path.keyframes[k].keypoints.len() {
            let root = sets.find(node(k, i));
            let g = *group_of_root.entry(root).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push((k, i));
        }
    }

    let mut fused_keypoints = Vec::with_capacity(groups.len());
    for members in &groups {
        let observations: Vec<Keypoint3D> = members
            .iter()
            .map(|&(k, i)| {
                let kp = &path.keyframes[k].keypoints[i];
                if k == anchor_id {
                    kp.clone()
                } else {
                    transform_keypoint(&transforms[k - first], kp)
                }
            })
            .collect();
        let fused = fuse(&observations);
        fused_keypoints.push(fused);
    }
    LocalMap {
        anchor_id,
        window,
        fused_keypoints,
        sources: groups,
    }
}

/// Information-form fusion. The first observation supplies the descriptor.
pub fn fuse(observations: &[Keypoint3D]) -> Keypoint3D {
    if observations.len() == 1 {
        return observations[0].clone();
    }
    let mut info = Matrix3::zeros();
    let mut vec = Vector3::zeros();
    for o in observations {
        let w = o.covariance.try_inverse().unwrap_or_else(Matrix3::zeros);
        info += w;
        vec += w * o.position;
    }
    let cov = info.try_inverse().unwrap_or_else(|| observations[0].covariance);
    let cov = (cov + cov.transpose()) * 0.5;
    Keypoint3D {
        position: cov * vec,
        covariance: cov,
        descriptor: observations[0].descriptor.clone(),
        source_pixel: observations[0].source_pixel,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub gauss_newton: GaussNewtonConfig,
    /// Squared Mahalanobis bound between a prior-based fix and its prior.
    pub prior_gate: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            gauss_newton: GaussNewtonConfig::default(),
            prior_gate: CHI2_6DOF_999,
        }
    }
}

/// 99.9% point of chi-squared with 6 degrees of freedom.
pub const CHI2_6DOF_999: f64 = 22.46;

/// Squared Mahalanobis distance of `log(a b^-1)` under `Sigma_a + Sigma_b`.
pub fn pose_mahalanobis2(a: &PoseGaussian, b: &PoseGaussian) -> f64 {
    let xi = a.mean.compose(&b.mean.inverse()).log();
    match (a.covariance + b.covariance).try_inverse() {
        Some(info) => (xi.transpose() * info * xi)[0],
        None => f64::INFINITY,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("localization failed: {inliers} inliers from {matches} candidate matches ({reason})")]
pub struct LocalizationFailure {
    pub matches: usize,
    pub inliers: usize,
    pub reason: String,
}

/// Prior-gated localization against a local map. The result is
/// `T_{anchor camera, current camera}`. A fix that disagrees with the prior
/// beyond `prior_gate` is rejected: with few, badly spread landmarks RANSAC
/// can settle on a flipped pose that still has enough inliers.
pub fn localize(
    map: &LocalMap,
    keypoints: &[Keypoint3D],
    prior: &PoseGaussian,
    config: &LocalizeConfig,
) -> Result<Alignment, LocalizationFailure> {
    let a = align(
        &map.fused_keypoints,
        keypoints,
        prior,
        &config.matching,
        &config.ransac,
        &config.gauss_newton,
    )
    .map_err(|e| LocalizationFailure {
        matches: match &e {
            crate::teach::AlignError::Ransac { candidates, .. } => *candidates,
            _ => 0,
        },
        inliers: e.inliers_found(),
        reason: e.to_string(),
    })?;
    let d2 = pose_mahalanobis2(&a.transform, prior);
    if d2 > config.prior_gate {
        return Err(LocalizationFailure {
            matches: a.candidate_matches,
            inliers: a.inliers.len(),
            reason: format!("fix is {d2:.1} (squared Mahalanobis) from the prior"),
        });
    }
    Ok(a)
}

/// Localization without a motion prior, used while searching.
pub fn relocalize(map: &LocalMap, keypoints: &[Keypoint3D], config: &LocalizeConfig) -> Result<Alignment, LocalizationFailure> {
    let matches: Vec<Match> = match_keypoints(&map.fused_keypoints, keypoints, None, &config.matching);
    align_matches(&map.fused_keypoints, keypoints, &matches, &config.ransac, &config.gauss_newton).map_err(|e| {
        LocalizationFailure {
            matches: matches.len(),
            inliers: e.inliers_found(),
            reason: e.to_string(),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Localized,
    VoOnly,
    Search,
    Halted,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Localized => "LOCALIZED",
            Mode::VoOnly => "VO_ONLY",
            Mode::Search => "SEARCH",
            Mode::Halted => "HALTED",
        }
    }

    /// Whether the vehicle may be driven autonomously in this mode.
    pub fn may_drive(&self) -> bool {
        matches!(self, Mode::Localized | Mode::VoOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LOCALIZED" => Ok(Mode::Localized),
            "VO_ONLY" => Ok(Mode::VoOnly),
            "SEARCH" => Ok(Mode::Search),
            "HALTED" => Ok(Mode::Halted),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepeatState {
    pub mode: Mode,
    pub nearest_id: usize,
    /// `T_{anchor camera, current camera}`.
    pub pose_in_anchor: PoseGaussian,
    pub distance_since_localization: f64,
    pub lateral_error_estimate: f64,
}

impl RepeatState {
    pub fn at_keyframe(id: usize) -> Self {
        Self {
            mode: Mode::Localized,
            nearest_id: id,
            pose_in_anchor: PoseGaussian::identity(),
            distance_since_localization: 0.0,
            lateral_error_estimate: 0.0,
        }
    }
}

/// What happened this frame, from the state machine's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Localized,
    Failed,
    /// The operator gives up on the traverse.
    OperatorHalt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateMachineConfig {
    /// Metres of unlocalized driving before the vehicle stops to search.
    pub halt_distance: f64,
}

impl Default for StateMachineConfig {
    fn default() -> Self {
        Self { halt_distance: 2.0 }
    }
}

/// Advances the mode. `vo` is the vehicle's motion over the frame.
pub fn step_state_machine(state: &RepeatState, outcome: Outcome, vo: &PoseGaussian, config: &StateMachineConfig) -> RepeatState {
    let mut next = *state;
    if state.mode == Mode::Halted {
        return next;
    }
    match outcome {
        Outcome::OperatorHalt => {
            if state.mode == Mode::Search {
                next.mode = Mode::Halted;
            }
        }
        Outcome::Localized => {
            next.mode = Mode::Localized;
            next.distance_since_localization = 0.0;
        }
        Outcome::Failed => {
            next.distance_since_localization += vo.mean.translation.norm();
            next.mode = match state.mode {
                Mode::Search => Mode::Search,
                _ if next.distance_since_localization > config.halt_distance => Mode::Search,
                _ => Mode::VoOnly,
            };
        }
    }
    next
}

/// Vehicle pose of keyframe `k` relative to keyframe `anchor`'s vehicle frame.
pub fn keyframe_vehicle_pose(path: &TaughtPath, anchor: usize, k: usize) -> Pose {
    path.to_vehicle(&path.relative(anchor, k).mean)
}

/// Closest keyframe within `window` of `anchor`. Distance is the
/// Euclidean distance between vehicle origins plus `heading_weight` metres
/// per radian of yaw difference, so keyframes laid down while turning in
/// place remain distinguishable. Ties go to the lower id.
pub fn nearest_keyframe(path: &TaughtPath, anchor: usize, t_anchor_current: &Pose, window: usize, heading_weight: f64) -> usize {
    let vehicle = path.to_vehicle(t_anchor_current);
    let lo = anchor.saturating_sub(window);
    let hi = (anchor + window).min(path.len() - 1);
    let mut best = (f64::INFINITY, anchor);
    for k in lo..=hi {
        let kf = keyframe_vehicle_pose(path, anchor, k);
        let dp = (vehicle.translation - kf.translation).norm_squared();
        let dyaw = heading_weight * wrap(vehicle.yaw() - kf.yaw());
        let d = dp + dyaw * dyaw;
        if d < best.0 - 1e-15 {
            best = (d, k);
        }
    }
    best.1
}

fn wrap(a: f64) -> f64 {
    crate::sim::script::wrap_angle(a)
}

/// Path-relative error of the vehicle in a keyframe's vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingError {
    /// Signed cross-track distance, left of the path positive.
    pub lateral: f64,
    /// Vehicle heading minus path heading, radians.
    pub heading: f64,
    /// Curvature of the local reference arc, 1/m, left positive.
    pub curvature: f64,
}

/// Signed distance from `(x, y)` to the arc through the origin tangent to
/// the x axis with curvature `kappa`.
pub fn arc_offset(kappa: f64, x: f64, y: f64) -> (f64, f64) {
    let q = kappa * (x * x + y * y) - 2.0 * y;
    let e = -q / (1.0 + (1.0 + kappa * q).max(0.0).sqrt());
    let heading = (kappa * x).atan2(1.0 - kappa * y);
    (e, heading)
}

/// Shortest chord used to fit the reference arc, metres. Keyframes laid
/// down while pitching over bumps can be centimetres apart.
pub const MIN_ARC_CHORD: f64 = 0.5;
/// Largest reference curvature, 1/m.
pub const MAX_ARC_CURVATURE: f64 = 2.0;

/// Cross-track and heading error relative to the taught path near
/// `nearest_id`. The reference is the arc leaving keyframe `nearest_id`
/// along its heading and passing through the first keyframe at least
/// `MIN_ARC_CHORD` away (ahead of the vehicle if possible, else behind).
pub fn lateral_error(path: &TaughtPath, nearest_id: usize, t_anchor_current: &Pose) -> TrackingError {
    let v = path.to_vehicle(t_anchor_current);
    let (x, y) = (v.translation.x, v.translation.y);
    let chord_to = |k: usize| {
        let p = keyframe_vehicle_pose(path, nearest_id, k).translation;
        (p.x, p.y)
    };
    let far_enough = |(px, py): (f64, f64)| px * px + py * py >= MIN_ARC_CHORD * MIN_ARC_CHORD;
    let ahead = (nearest_id + 1..path.len()).map(chord_to).find(|&c| far_enough(c));
    let behind = (0..nearest_id).rev().map(chord_to).find(|&c| far_enough(c));
    let neighbour = if x >= 0.0 { ahead.or(behind) } else { behind.or(ahead) };
    let kappa = neighbour
        .map(|(px, py)| (2.0 * py / (px * px + py * py)).clamp(-MAX_ARC_CURVATURE, MAX_ARC_CURVATURE))
        .unwrap_or(0.0);
    let (lateral, path_heading) = arc_offset(kappa, x, y);
    TrackingError {
        lateral,
        heading: wrap(v.yaw() - path_heading),
        curvature: kappa,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerGains {
    /// 1/m^2 on lateral error.
    pub lateral: f64,
    /// 1/m on heading error.
    pub heading: f64,
    /// Heading errors beyond this (radians) are corrected by turning in place.
    pub spin_threshold: f64,
    /// rad/s while turning in place.
    pub spin_rate: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            lateral: 1.0,
            heading: 2.0,
            spin_threshold: 0.5,
            spin_rate: 0.3,
        }
    }
}

/// Autonomous command for a mode: path following while LOCALIZED or
/// VO_ONLY, stopped otherwise.
pub fn mode_command(mode: Mode, error: &TrackingError, speed: f64, gains: &ControllerGains) -> Command {
    if mode.may_drive() {
        steering_command(error, speed, gains)
    } else {
        Command::default()
    }
}

/// Path-following law `omega = v (kappa - k_e e - k_theta theta)`.
pub fn steering_command(error: &TrackingError, speed: f64, gains: &ControllerGains) -> Command {
    if error.heading.abs() > gains.spin_threshold {
        return Command {
            speed: 0.0,
            yaw_rate: -error.heading.signum() * gains.spin_rate,
        };
    }
    Command {
        speed,
        yaw_rate: speed * (error.curvature - gains.lateral * error.lateral - gains.heading * error.heading),
    }
}

pub const TRAVERSE_LOG_SCHEMA: &str = "# vtr-traverse-log v1";
pub const TRAVERSE_LOG_COLUMNS: [&str; 16] = [
    "t",
    "mode",
    "true_x",
    "true_y",
    "true_z",
    "est_lateral",
    "true_lateral",
    "vo_matches",
    "map_matches",
    "nearest_id",
    "est_x",
    "est_y",
    "est_z",
    "est_yaw",
    "true_yaw",
    "intervention",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraverseRecord {
    pub t: f64,
    pub mode: Mode,
    pub true_position: Vector3<f64>,
    pub est_lateral: f64,
    pub true_lateral: f64,
    pub vo_matches: usize,
    pub map_matches: usize,
    pub nearest_id: usize,
    /// Estimated vehicle position, chained along the taught path from the
    /// first keyframe's true pose.
    pub est_position: Vector3<f64>,
    pub est_yaw: f64,
    pub true_yaw: f64,
    /// The operator was driving during this frame.
    pub intervention: bool,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unsupported traverse log schema: expected `{expected}`, found `{found}`")]
    SchemaVersionMismatch { found: String, expected: &'static str },
    #[error("malformed traverse log: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraverseLog {
    pub records: Vec<TraverseRecord>,
}

impl TraverseLog {
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "{TRAVERSE_LOG_SCHEMA}").expect("write to vec");
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAVERSE_LOG_COLUMNS).expect("write to vec");
        for r in &self.records {
            let row = [
                r.t.to_string(),
                r.mode.to_string(),
                r.true_position.x.to_string(),
                r.true_position.y.to_string(),
                r.true_position.z.to_string(),
                r.est_lateral.to_string(),
                r.true_lateral.to_string(),
                r.vo_matches.to_string(),
                r.map_matches.to_string(),
                r.nearest_id.to_string(),
                r.est_position.x.to_string(),
                r.est_position.y.to_string(),
                r.est_position.z.to_string(),
                r.est_yaw.to_string(),
                r.true_yaw.to_string(),
                u8::from(r.intervention).to_string(),
            ];
            w.write_record(&row).expect("write to vec");
        }
        w.into_inner().expect("flush to vec")
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self, LogError> {
        let text = std::str::from_utf8(bytes).map_err(|e| LogError::Malformed(e.to_string()))?;
        let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
        let first = first.trim_end_matches('\r');
        if first != TRAVERSE_LOG_SCHEMA {
            return Err(LogError::SchemaVersionMismatch {
                found: first.to_string(),
                expected: TRAVERSE_LOG_SCHEMA,
            });
        }
        let mut reader = csv::Reader::from_reader(rest.as_bytes());
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| LogError::Malformed(format!("missing column `{name}`")))
        };
        let idx: Vec<usize> = TRAVERSE_LOG_COLUMNS[..9].iter().map(|c| col(c)).collect::<Result<_, _>>()?;
        // columns beyond the required nine are optional
        let opt: Vec<Option<usize>> = TRAVERSE_LOG_COLUMNS[9..].iter().map(|c| col(c).ok()).collect();

        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64, LogError> {
                field(i)
                    .parse::<f64>()
                    .map_err(|e| LogError::Malformed(format!("row {}: `{}`: {e}", line + 1, field(i))))
            };
            let count = |i: usize| -> Result<usize, LogError> {
                field(i)
                    .parse::<usize>()
                    .map_err(|e| LogError::Malformed(format!("row {}: `{}`: {e}", line + 1, field(i))))
            };
            let opt_num = |k: usize| -> Result<f64, LogError> { opt[k].map_or(Ok(0.0), num) };
            records.push(TraverseRecord {
                t: num(idx[0])?,
                mode: field(idx[1]).parse().map_err(LogError::Malformed)?,
                true_position: Vector3::new(num(idx[2])?, num(idx[3])?, num(idx[4])?),
                est_lateral: num(idx[5])?,
                true_lateral: num(idx[6])?,
                vo_matches: count(idx[7])?,
                map_matches: count(idx[8])?,
                nearest_id: opt[0].map_or(Ok(0), count)?,
                est_position: Vector3::new(opt_num(1)?, opt_num(2)?, opt_num(3)?),
                est_yaw: opt_num(4)?,
                true_yaw: opt_num(5)?,
                intervention: opt[6].map_or(Ok(0), count)? != 0,
            });
        }
        let log = Self { records };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<(), LogError> {
        if self.records.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(LogError::Malformed("timestamps are not monotonic".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), LogError> {
        Ok(write_atomic(path, &self.to_csv())?)
    }

    pub fn load(path: &Path) -> Result<Self, LogError> {
        Self::from_csv(&std::fs::read(path)?)
    }
}
