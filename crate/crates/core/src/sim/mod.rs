//! Synthetic worlds for exercising the pipeline: terrain, landmarks, a
//! kinematic vehicle, scripted drives and a feature detector driven by ground
//! truth.

pub mod script;
pub mod stream;
pub mod terrain;
pub mod vehicle;
pub mod world;

pub use script::{ReferencePath, Script, ScriptError, ScriptPath, StartPose, Waypoint};
pub use terrain::{Region, Terrain};
pub use vehicle::{advance_vehicle, pose_on_terrain, Command, VehicleState};
pub use world::{
    camera_pose, render_observations, DropoutRegion, Landmark, LandmarkField, NoiseConfig, RenderOptions, Rendered,
    Wall, World, WorldConfig,
};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::ground::{GroundModel, Rig};

/// Seed for one frame's detector noise.
pub fn frame_seed(seed: u64, frame: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ frame.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Planar bounding box (x0, y0, x1, y1) of a planned script.
pub fn script_bounds(path: &ScriptPath) -> (f64, f64, f64, f64) {
    let r = path.reference(0.25);
    r.points.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |b, p| (b.0.min(p.0), b.1.min(p.1), b.2.max(p.0), b.3.max(p.1)),
    )
}

/// One captured frame of a scripted drive.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub time: f64,
    pub vehicle: VehicleState,
    pub rendered: Rendered,
}

/// Iterator over the frames of a scripted drive.
pub struct FrameStream<'a> {
    world: &'a World,
    ground: GroundModel,
    intrinsics: CameraIntrinsics,
    noise: NoiseConfig,
    options: RenderOptions,
    seed: u64,
    path: &'a ScriptPath,
    times: Vec<f64>,
    next: usize,
}

impl Iterator for FrameStream<'_> {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        let time = *self.times.get(self.next)?;
        let index = self.next;
        self.next += 1;
        let vehicle = vehicle_at(&self.world.terrain, self.path, time);
        let rendered = render_observations(
            self.world,
            &self.ground,
            &self.intrinsics,
            &vehicle,
            &self.noise,
            &self.options,
            frame_seed(self.seed, index as u64),
        );
        Some(Frame {
            index,
            time,
            vehicle,
            rendered,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.times.len() - self.next;
        (n, Some(n))
    }
}

/// True vehicle state at time `t` along a scripted path.
pub fn vehicle_at(terrain: &Terrain, path: &ScriptPath, t: f64) -> VehicleState {
    let p = path.pose_at(t);
    let (speed, steering) = path.rates_at(t);
    VehicleState {
        speed,
        steering,
        ..VehicleState::at(terrain, p.x, p.y, p.heading)
    }
}

/// True vehicle pose at time `t`.
pub fn true_pose_at(terrain: &Terrain, path: &ScriptPath, t: f64) -> Pose {
    vehicle_at(terrain, path, t).pose
}

/// The deterministic frame sequence a driver following `path` would record.
pub fn scripted_teach_drive<'a>(
    world: &'a World,
    path: &'a ScriptPath,
    rig: &Rig,
    noise: &NoiseConfig,
    options: &RenderOptions,
    seed: u64,
) -> FrameStream<'a> {
    FrameStream {
        world,
        ground: rig.ground,
        intrinsics: rig.intrinsics,
        noise: *noise,
        options: *options,
        seed,
        path,
        times: path.frame_times(),
        next: 0,
    }
}
