//! End-to-end runs: a scripted teach drive, then a closed-loop repeat in the
//! same simulated world.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::{ConfigError, DepthSource, RunConfig};
use crate::estimation::chain_vo;
use crate::geometry::{Pose, PoseGaussian};
use crate::ground::{Keypoint3D, Rig};
use crate::repeat::{
    build_local_map, lateral_error, localize, mode_command, nearest_keyframe, pose_mahalanobis2, relocalize,
    step_state_machine,
    LocalMap, Mode, Outcome, RepeatState, TraverseLog, TraverseRecord,
};
use crate::sim::{
    advance_vehicle, frame_seed, render_observations, script_bounds, scripted_teach_drive, vehicle_at, Command,
    ReferencePath, Rendered, ScriptPath, VehicleState, World,
};
use crate::teach::{align, rig_fingerprint, TaughtPath, TeachError, Teacher};

const TEACH_SALT: u64 = 0x7465_6163;
const REPEAT_SALT: u64 = 0x7265_7065;
const ODOMETRY_SALT: u64 = 0x6f64_6f6d;
const LOCALIZE_SEED_OFFSET: u64 = 1 << 40;
/// Spacing of the dense reference used for true cross-track error, metres.
const REFERENCE_STEP: f64 = 0.01;
/// How far ahead of the vehicle the operator steers for, metres.
const OPERATOR_LOOKAHEAD: f64 = 1.0;
const MAP_CACHE_LIMIT: usize = 16;

/// A configured world and drive script.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: RunConfig,
    pub rig: Rig,
    pub script: ScriptPath,
    pub world: World,
}

impl Scenario {
    pub fn new(config: RunConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let rig = config.rig()?;
        let script = config
            .script
            .plan()
            .map_err(|e| ConfigError::Invalid(format!("script: {e}")))?;
        let world = World::generate(config.terrain.clone(), script_bounds(&script), &config.world, config.seed);
        Ok(Self {
            config,
            rig,
            script,
            world,
        })
    }

    /// Keypoints for one rendered frame under the configured depth source.
    pub fn keypoints(&self, rendered: &Rendered) -> Vec<Keypoint3D> {
        match self.config.depth {
            DepthSource::Mono => mono_keypoints(&self.rig, rendered),
            DepthSource::PerfectDepth => perfect_depth_keypoints(rendered, self.config.features.perfect_depth_sigma),
        }
    }
}

/// Ground-plane backprojection of every observation that yields a depth.
pub fn mono_keypoints(rig: &Rig, rendered: &Rendered) -> Vec<Keypoint3D> {
    let bp = rig.ground.backprojector(&rig.intrinsics);
    rendered
        .observations
        .iter()
        .filter_map(|o| bp.backproject(o).ok())
        .collect()
}

/// True camera-frame points with a small fixed covariance, standing in for
/// a stereo rig.
pub fn perfect_depth_keypoints(rendered: &Rendered, sigma: f64) -> Vec<Keypoint3D> {
    rendered
        .observations
        .iter()
        .zip(&rendered.camera_points)
        .map(|(o, p)| Keypoint3D {
            position: *p,
            covariance: Matrix3::identity() * sigma * sigma,
            descriptor: o.descriptor.clone(),
            source_pixel: nalgebra::Vector2::new(o.u, o.v),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TeachRun {
    pub path: TaughtPath,
    pub frames: usize,
}

pub fn run_teach(scenario: &Scenario) -> Result<TeachRun, TeachError> {
    let cfg = &scenario.config;
    let mut teacher = Teacher::new(scenario.rig, cfg.teach_config());
    let stream = scripted_teach_drive(
        &scenario.world,
        &scenario.script,
        &scenario.rig,
        &cfg.noise,
        &cfg.render_options(),
        cfg.seed ^ TEACH_SALT,
    );
    let mut frames = 0;
    for frame in stream {
        let kps = scenario.keypoints(&frame.rendered);
        teacher.teach_step(kps, frame.time)?;
        frames += 1;
    }
    Ok(TeachRun {
        path: teacher.finish(),
        frames,
    })
}

#[derive(Debug, Error)]
pub enum RepeatError {
    #[error("map was built with a different rig (map {found}, config {expected})")]
    MapRigMismatch { expected: String, found: String },
    #[error("invalid repeat setup: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct RepeatRun {
    pub log: TraverseLog,
    pub final_mode: Mode,
    pub reached_destination: bool,
}

/// Wheel odometry between two true vehicle states, with scale and heading
/// noise, expressed as a camera-frame step.
fn odometry_step(rig: &Rig, cfg: &RunConfig, prev: &VehicleState, cur: &VehicleState, rng: &mut ChaCha8Rng) -> PoseGaussian {
    let truth = prev.pose.inverse().compose(&cur.pose);
    let d = truth.translation.norm();
    let scale = 1.0 + cfg.repeat.odometry_scale_sigma * rng.sample::<f64, _>(StandardNormal);
    let dyaw = cfg.repeat.odometry_yaw_sigma * d * rng.sample::<f64, _>(StandardNormal);
    let measured = Pose::from_yaw(dyaw, Vector3::zeros()).compose(&Pose {
        rotation: truth.rotation,
        translation: truth.translation * scale,
    });
    let s = cfg.repeat.odometry_scale_sigma * d + 1e-4;
    let r = cfg.repeat.odometry_yaw_sigma * d + 1e-4;
    let cov_v = Matrix6::from_diagonal(&Vector6::new(s * s, s * s, s * s, r * r, r * r, r * r));
    let t_cv = rig.ground.t_cv;
    let ad = t_cv.adjoint();
    PoseGaussian::new(t_cv.compose(&measured).compose(&t_cv.inverse()), ad * cov_v * ad.transpose())
}

/// Point on the reference `s` metres along it, with its direction.
fn reference_point(reference: &ReferencePath, s: f64) -> (f64, f64) {
    let n = reference.points.len();
    if n < 2 {
        return reference.points.first().copied().unwrap_or((0.0, 0.0));
    }
    let s = s.clamp(0.0, reference.length());
    let i = reference.distance.partition_point(|&d| d <= s).clamp(1, n - 1);
    let (a, b) = (reference.points[i - 1], reference.points[i]);
    let span = reference.distance[i] - reference.distance[i - 1];
    let f = if span > 0.0 { (s - reference.distance[i - 1]) / span } else { 0.0 };
    (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
}

/// Pure-pursuit steering toward a point on the taught route.
fn operator_command(vehicle: &VehicleState, target: (f64, f64), speed: f64) -> Command {
    let p = vehicle.position();
    let (dx, dy) = (target.0 - p.x, target.1 - p.y);
    let l = dx.hypot(dy);
    if l < 1e-6 {
        return Command { speed, yaw_rate: 0.0 };
    }
    let alpha = crate::sim::script::wrap_angle(dy.atan2(dx) - vehicle.heading);
    if alpha.abs() > std::f64::consts::FRAC_PI_2 {
        return Command {
            speed: 0.0,
            yaw_rate: alpha.signum() * 0.5,
        };
    }
    Command {
        speed,
        yaw_rate: 2.0 * speed * alpha.sin() / l,
    }
}

/// Closed-loop repeat of `path` through the scenario's world. The vehicle
/// starts exactly on the configured start keyframe.
pub fn run_repeat(scenario: &Scenario, path: &TaughtPath) -> Result<RepeatRun, RepeatError> {
    let cfg = &scenario.config;
    let rig = &scenario.rig;
    let expected = rig_fingerprint(rig);
    if path.fingerprint != expected {
        return Err(RepeatError::MapRigMismatch {
            expected,
            found: path.fingerprint.clone(),
        });
    }
    if path.is_empty() {
        return Err(RepeatError::Invalid("map has no keyframes".into()));
    }
    let start = cfg.repeat.start_keyframe;
    let destination = cfg.repeat.destination.unwrap_or(path.len() - 1);
    if start >= path.len() || destination >= path.len() || destination < start {
        return Err(RepeatError::Invalid(format!(
            "start {start} / destination {destination} outside map of {} keyframes",
            path.len()
        )));
    }

    let terrain = &scenario.world.terrain;
    let dt = 1.0 / cfg.script.frame_rate;
    let time_limit = cfg
        .repeat
        .time_limit
        .unwrap_or(3.0 * path.length() / cfg.repeat.speed + 120.0);
    let loc_cfg = {
        let mut c = cfg.localize_config();
        c.ransac.seed = c.ransac.seed.wrapping_add(LOCALIZE_SEED_OFFSET);
        c
    };
    let teach_cfg = cfg.teach_config();
    let sm_cfg = cfg.state_machine();
    let render = cfg.render_options();
    let window = cfg.localization.window_size;

    let reference = scenario.script.reference(REFERENCE_STEP);
    let keyframe_poses = path.reconstruct();
    let world_from_first = vehicle_at(terrain, &scenario.script, path.keyframes[0].timestamp).pose;

    let mut vehicle = VehicleState {
        speed: 0.0,
        steering: 0.0,
        ..vehicle_at(terrain, &scenario.script, path.keyframes[start].timestamp)
    };
    let (_, mut hint, _) = {
        let p = vehicle.position();
        reference.cross_track(p.x, p.y, reference.points.len() / 2, reference.points.len())
    };

    let mut state = RepeatState::at_keyframe(start);
    let mut maps: HashMap<usize, LocalMap> = HashMap::new();
    let mut odo_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ODOMETRY_SALT);
    let mut previous: Option<(Vec<Keypoint3D>, VehicleState)> = None;
    let mut last_step = Pose::identity();
    let mut stopped_in_search = 0.0;
    let mut intervention_distance = 0.0;
    let mut records = Vec::new();
    let mut reached = false;

    for frame in 0u64.. {
        let t = frame as f64 * dt;
        let rendered = render_observations(
            &scenario.world,
            &rig.ground,
            &rig.intrinsics,
            &vehicle,
            &cfg.noise,
            &render,
            frame_seed(cfg.seed ^ REPEAT_SALT, frame),
        );
        let kps = scenario.keypoints(&rendered);

        // frame-to-frame motion, falling back to wheel odometry
        let (step, vo_matches) = match &previous {
            None => (PoseGaussian::identity(), 0),
            Some((prev_kps, prev_vehicle)) => {
                let prior = PoseGaussian::with_sigmas(last_step, &teach_cfg.prediction_sigmas);
                let mut ransac = teach_cfg.ransac;
                ransac.seed = ransac.seed.wrapping_add(frame);
                match align(prev_kps, &kps, &prior, &teach_cfg.matching, &ransac, &teach_cfg.gauss_newton) {
                    Ok(a) if pose_mahalanobis2(&a.transform, &prior) <= loc_cfg.prior_gate => {
                        let n = a.inliers.len();
                        (a.transform, n)
                    }
                    Ok(_) => (odometry_step(rig, cfg, prev_vehicle, &vehicle, &mut odo_rng), 0),
                    Err(e) => (odometry_step(rig, cfg, prev_vehicle, &vehicle, &mut odo_rng), e.inliers_found()),
                }
            }
        };
        last_step = step.mean;
        let mut predicted = chain_vo(&state.pose_in_anchor, &step);

        let anchor = nearest_keyframe(path, state.nearest_id, &predicted.mean, window, cfg.localization.heading_weight);
        if anchor != state.nearest_id {
            predicted = chain_vo(&path.relative(anchor, state.nearest_id), &predicted);
        }
        if maps.len() > MAP_CACHE_LIMIT {
            maps.retain(|&k, _| k.abs_diff(anchor) <= window);
        }
        let map = maps
            .entry(anchor)
            .or_insert_with(|| build_local_map(path, anchor, window));

        let attempt = if state.mode == Mode::Search {
            relocalize(map, &kps, &loc_cfg)
        } else {
            localize(map, &kps, &predicted, &loc_cfg)
        };
        let (outcome, pose, map_matches) = match attempt {
            Ok(a) => (Outcome::Localized, a.transform, a.inliers.len()),
            Err(f) => (Outcome::Failed, predicted, f.inliers),
        };

        let intervening = state.mode == Mode::Search && stopped_in_search >= cfg.localization.search_timeout;
        let outcome = if outcome == Outcome::Failed && intervening && intervention_distance > cfg.localization.max_intervention
        {
            Outcome::OperatorHalt
        } else {
            outcome
        };
        let vehicle_step = PoseGaussian::exact(path.to_vehicle(&step.mean));
        let mut next = step_state_machine(&state, outcome, &vehicle_step, &sm_cfg);
        next.nearest_id = anchor;
        next.pose_in_anchor = pose;
        let tracking = lateral_error(path, anchor, &pose.mean);
        next.lateral_error_estimate = tracking.lateral;
        if next.mode != Mode::Search {
            stopped_in_search = 0.0;
        }

        let p = vehicle.position();
        let (true_lateral, h, s_along) = reference.cross_track(p.x, p.y, hint, 400);
        hint = h;
        let est = world_from_first.compose(&path.to_vehicle(&keyframe_poses[anchor].compose(&pose.mean)));
        let operator_driving = next.mode == Mode::Search && stopped_in_search >= cfg.localization.search_timeout;
        records.push(TraverseRecord {
            t,
            mode: next.mode,
            true_position: p,
            est_lateral: tracking.lateral,
            true_lateral,
            vo_matches,
            map_matches,
            nearest_id: anchor,
            est_position: est.translation,
            est_yaw: est.yaw(),
            true_yaw: vehicle.heading,
            intervention: operator_driving,
        });
        state = next;

        if state.mode == Mode::Halted {
            break;
        }
        let in_destination = path.to_vehicle(&state.pose_in_anchor.mean).translation.x;
        if anchor == destination && in_destination >= 0.0 {
            reached = true;
            break;
        }
        if t >= time_limit {
            break;
        }

        let command = if operator_driving {
            let target = reference_point(&reference, s_along + OPERATOR_LOOKAHEAD);
            operator_command(&vehicle, target, cfg.repeat.operator_speed)
        } else {
            if !state.mode.may_drive() {
                stopped_in_search += dt;
            }
            mode_command(state.mode, &tracking, cfg.repeat.speed, &cfg.repeat.controller)
        };
        let moved = advance_vehicle(terrain, &vehicle, &command, dt);
        if operator_driving {
            intervention_distance += (moved.position() - vehicle.position()).norm();
        }
        previous = Some((kps, vehicle));
        vehicle = moved;
    }

    Ok(RepeatRun {
        final_mode: state.mode,
        reached_destination: reached,
        log: TraverseLog { records },
    })
}
