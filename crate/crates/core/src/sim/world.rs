//! Landmark fields and the synthetic feature detector.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::terrain::{Region, Terrain};
use super::vehicle::VehicleState;
use crate::geometry::{CameraIntrinsics, PixelObservation, Pose};
use crate::ground::{pixel_sigma_for_level, GroundModel};

pub const DESCRIPTOR_DIM: usize = 16;
pub const PYRAMID_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    pub position: Vector3<f64>,
    pub descriptor: Vec<f64>,
    pub level: u8,
    /// False for landmarks off the terrain surface (walls).
    pub on_ground: bool,
}

/// A vertical wall of texture rising from the terrain along a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wall {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub height: f64,
    /// Landmarks per square metre of wall face.
    pub density: f64,
}

/// Extra feature dropout applied to landmarks inside a region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutRegion {
    pub region: Region,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Ground landmarks per square metre.
    pub density: f64,
    /// Landmarks are scattered this far beyond the route's bounding box.
    pub margin: f64,
    /// Relative frequency of pyramid levels 0..3.
    pub level_weights: [f64; PYRAMID_LEVELS],
    pub walls: Vec<Wall>,
    pub dropout_regions: Vec<DropoutRegion>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            density: 130.0,
            margin: 6.0,
            level_weights: [0.4, 0.3, 0.2, 0.1],
            walls: Vec::new(),
            dropout_regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Injected pixel noise at pyramid level 0; doubles per level.
    pub pixel_sigma: f64,
    /// Per-component Gaussian noise on descriptors before renormalising.
    pub descriptor_sigma: f64,
    /// Fraction of observations whose descriptor is replaced at random.
    pub corruption_rate: f64,
    /// Fraction of observations lost before the budget is applied.
    pub dropout_rate: f64,
    /// Fraction of observations that swap descriptors with another one.
    pub outlier_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.5,
            descriptor_sigma: 0.02,
            corruption_rate: 0.05,
            dropout_rate: 0.05,
            outlier_rate: 0.02,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            pixel_sigma: 0.0,
            descriptor_sigma: 0.0,
            corruption_rate: 0.0,
            dropout_rate: 0.0,
            outlier_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        for r in [self.corruption_rate, self.dropout_rate, self.outlier_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err("noise rates must lie in [0, 1]");
            }
        }
        if !(self.pixel_sigma >= 0.0 && self.descriptor_sigma >= 0.0) {
            return Err("noise sigmas must be non-negative");
        }
        Ok(())
    }
}

/// Landmarks bucketed on a square grid for visibility queries.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkField {
    pub landmarks: Vec<Landmark>,
    pub density: f64,
    cell: f64,
    grid: HashMap<(i64, i64), Vec<usize>>,
}

impl LandmarkField {
    pub fn new(landmarks: Vec<Landmark>, density: f64) -> Self {
        let cell = 1.0;
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, l) in landmarks.iter().enumerate() {
            grid.entry(cell_of(cell, l.position.x, l.position.y)).or_default().push(i);
        }
        Self {
            landmarks,
            density,
            cell,
            grid,
        }
    }

    /// Indices of landmarks within `radius` (planar) of `(x, y)`, ascending.
    pub fn near(&self, x: f64, y: f64, radius: f64) -> Vec<usize> {
        let (cx0, cy0) = cell_of(self.cell, x - radius, y - radius);
        let (cx1, cy1) = cell_of(self.cell, x + radius, y + radius);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for cx in cx0..=cx1 {
            for cy in cy0..=cy1 {
                if let Some(ids) = self.grid.get(&(cx, cy)) {
                    out.extend(ids.iter().copied().filter(|&i| {
                        let p = self.landmarks[i].position;
                        (p.x - x).powi(2) + (p.y - y).powi(2) <= r2
                    }));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn cell_of(cell: f64, x: f64, y: f64) -> (i64, i64) {
    ((x / cell).floor() as i64, (y / cell).floor() as i64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub terrain: Terrain,
    pub field: LandmarkField,
    pub dropout_regions: Vec<DropoutRegion>,
}

pub fn random_descriptor(rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn pick_level(rng: &mut impl Rng, weights: &[f64; PYRAMID_LEVELS]) -> u8 {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u8;
        }
        u -= w;
    }
    (PYRAMID_LEVELS - 1) as u8
}

impl World {
    /// Scatters ground landmarks uniformly over `bounds` (x0, y0, x1, y1)
    /// grown by the margin, then adds wall landmarks.
    pub fn generate(terrain: Terrain, bounds: (f64, f64, f64, f64), config: &WorldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6e64_6d61_726b);
        let (x0, y0) = (bounds.0 - config.margin, bounds.1 - config.margin);
        let (x1, y1) = (bounds.2 + config.margin, bounds.3 + config.margin);
        let area = (x1 - x0) * (y1 - y0);
        let count = (config.density * area).round() as usize;
        let mut landmarks = Vec::with_capacity(count);
        for id in 0..count {
            let x = rng.random_range(x0..x1);
            let y = rng.random_range(y0..y1);
            landmarks.push(Landmark {
                id,
                position: Vector3::new(x, y, terrain.height(x, y)),
                descriptor: random_descriptor(&mut rng),
                level: pick_level(&mut rng, &config.level_weights),
                on_ground: true,
            });
        }
        for w in &config.walls {
            let len = (w.x1 - w.x0).hypot(w.y1 - w.y0);
            let n = (w.density * len * w.height).round() as usize;
            for _ in 0..n {
                let f = rng.random::<f64>();
                let x = w.x0 + f * (w.x1 - w.x0);
                let y = w.y0 + f * (w.y1 - w.y0);
                let z = terrain.height(x, y) + rng.random::<f64>() * w.height;
                landmarks.push(Landmark {
                    id: landmarks.len(),
                    position: Vector3::new(x, y, z),
                    descriptor: random_descriptor(&mut rng),
                    level: pick_level(&mut rng, &config.level_weights),
                    on_ground: false,
                });
            }
        }
        Self {
            terrain,
            field: LandmarkField::new(landmarks, config.density),
            dropout_regions: config.dropout_regions.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    /// Maximum observations per frame, nearest first.
    pub budget: usize,
    /// Level-0 pixel sigma the detector reports with each observation.
    pub reported_pixel_sigma: f64,
    /// Landmarks farther than this from the camera are never considered.
    pub max_distance: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            budget: 600,
            reported_pixel_sigma: 0.5,
            max_distance: 8.0,
        }
    }
}

/// One frame of synthetic detections plus oracle data.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub observations: Vec<PixelObservation>,
    /// True landmark behind each observation (oracle use only).
    pub landmark_ids: Vec<usize>,
    /// True landmark position in the camera frame.
    pub camera_points: Vec<Vector3<f64>>,
}

impl Rendered {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Camera -> world for a vehicle carrying the rig.
pub fn camera_pose(ground: &GroundModel, vehicle: &VehicleState) -> Pose {
    vehicle.pose.compose(&ground.t_cv.inverse())
}

/// Projects visible landmarks through the true camera pose and corrupts the
/// result according to `noise`. The stream is a pure function of the inputs.
pub fn render_observations(
    world: &World,
    ground: &GroundModel,
    k: &CameraIntrinsics,
    vehicle: &VehicleState,
    noise: &NoiseConfig,
    options: &RenderOptions,
    frame_seed: u64,
) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
    let t_wc = camera_pose(ground, vehicle);
    let t_cw = t_wc.inverse();
    let c = t_wc.translation;

    struct Candidate {
        index: usize,
        distance: f64,
        pixel: Vector2<f64>,
        point: Vector3<f64>,
    }
    let mut visible = Vec::new();
    for i in world.field.near(c.x, c.y, options.max_distance) {
        let l = &world.field.landmarks[i];
        let p = t_cw.transform_point(&l.position);
        if p.z <= 0.0 {
            continue;
        }
        let (u, v) = k.denormalize(p.x / p.z, p.y / p.z);
        if !k.contains(u, v) {
            continue;
        }
        visible.push(Candidate {
            index: i,
            distance: p.norm(),
            pixel: Vector2::new(u, v),
            point: p,
        });
    }

    // noise and dropout, drawn in landmark order so the stream is stable
    let mut kept = Vec::with_capacity(visible.len());
    for cand in visible {
        let l = &world.field.landmarks[cand.index];
        let sigma = pixel_sigma_for_level(noise.pixel_sigma, l.level);
        let mut pixel = cand.pixel;
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("finite sigma");
            pixel += Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
        }
        let mut drop = rng.random::<f64>() < noise.dropout_rate;
        for r in &world.dropout_regions {
            let hit = rng.random::<f64>() < r.rate;
            if r.region.contains(l.position.x, l.position.y) && hit {
                drop = true;
            }
        }
        if drop || !k.contains(pixel.x, pixel.y) {
            continue;
        }
        let mut descriptor = l.descriptor.clone();
        if rng.random::<f64>() < noise.corruption_rate {
            descriptor = random_descriptor(&mut rng);
        } else if noise.descriptor_sigma > 0.0 {
            let n = Normal::new(0.0, noise.descriptor_sigma).expect("finite sigma");
            for d in descriptor.iter_mut() {
                *d += n.sample(&mut rng);
            }
            let norm = descriptor.iter().map(|x| x * x).sum::<f64>().sqrt();
            descriptor.iter_mut().for_each(|d| *d /= norm);
        }
        let reported = pixel_sigma_for_level(options.reported_pixel_sigma, l.level);
        kept.push((
            cand,
            PixelObservation {
                u: pixel.x,
                v: pixel.y,
                sigma_u: reported,
                sigma_v: reported,
                descriptor,
            },
        ));
    }

    // outliers: pairs of observations trade descriptors
    if noise.outlier_rate > 0.0 && kept.len() >= 2 {
        let swaps = ((kept.len() as f64 * noise.outlier_rate) / 2.0).round() as usize;
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.shuffle(&mut rng);
        for pair in order.chunks_exact(2).take(swaps) {
            let tmp = kept[pair[0]].1.descriptor.clone();
            kept[pair[0]].1.descriptor = kept[pair[1]].1.descriptor.clone();
            kept[pair[1]].1.descriptor = tmp;
        }
    }

    kept.sort_by(|a, b| a.0.distance.total_cmp(&b.0.distance).then(a.0.index.cmp(&b.0.index)));
    kept.truncate(options.budget);

    let mut out = Rendered {
        observations: Vec::with_capacity(kept.len()),
        landmark_ids: Vec::with_capacity(kept.len()),
        camera_points: Vec::with_capacity(kept.len()),
    };
    for (cand, obs) in kept {
        out.landmark_ids.push(world.field.landmarks[cand.index].id);
        out.camera_points.push(cand.point);
        out.observations.push(obs);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground::Rig;

    fn world(terrain: Terrain) -> World {
        World::generate(terrain, (0.0, 0.0, 10.0, 0.0), &WorldConfig::default(), 7)
    }

    #[test]
    fn plane_zero_noise_backprojects_exactly() {
        let rig = Rig::default();
        let w = world(Terrain::Plane);
        let v = VehicleState::at(&w.terrain, 3.0, 0.2, 0.1);
        let r = render_observations(&w, &rig.ground, &rig.intrinsics, &v, &NoiseConfig::none(), &RenderOptions::default(), 1);
        assert!(r.len() > 400, "only {} observations", r.len());
        let bp = rig.ground.backprojector(&rig.intrinsics);
        let t_wc = camera_pose(&rig.ground, &v);
        for (obs, id) in r.observations.iter().zip(&r.landmark_ids) {
            let kp = bp.backproject(obs).unwrap();
            let world_point = t_wc.transform_point(&kp.position);
            assert!((world_point - w.field.landmarks[*id].position).norm() < 1e-6);
        }
    }

    #[test]
    fn budget_and_dropout() {
        let rig = Rig::default();
        let w = world(Terrain::Plane);
        let v = VehicleState::at(&w.terrain, 3.0, 0.0, 0.0);
        let opts = RenderOptions {
            budget: 50,
            ..Default::default()
        };
        let r = render_observations(&w, &rig.ground, &rig.intrinsics, &v, &NoiseConfig::default(), &opts, 1);
        assert_eq!(r.len(), 50);
        let d: Vec<f64> = r.camera_points.iter().map(|p| p.norm()).collect();
        assert!(d.windows(2).all(|p| p[0] <= p[1]));
        let all_drop = NoiseConfig {
            dropout_rate: 1.0,
            ..Default::default()
        };
        assert!(render_observations(&w, &rig.ground, &rig.intrinsics, &v, &all_drop, &opts, 1).is_empty());
    }

    #[test]
    fn rendering_is_deterministic_and_in_bounds() {
        let rig = Rig::default();
        let w = world(Terrain::dome(0.15, 10.0));
        let v = VehicleState::at(&w.terrain, 5.0, 0.0, 0.0);
        let a = render_observations(&w, &rig.ground, &rig.intrinsics, &v, &NoiseConfig::default(), &RenderOptions::default(), 42);
        let b = render_observations(&w, &rig.ground, &rig.intrinsics, &v, &NoiseConfig::default(), &RenderOptions::default(), 42);
        assert_eq!(a, b);
        for (o, p) in a.observations.iter().zip(&a.camera_points) {
            assert!(rig.intrinsics.contains(o.u, o.v));
            assert!(p.z > 0.0);
        }
        let c = render_observations(&w, &rig.ground, &rig.intrinsics, &v, &NoiseConfig::default(), &RenderOptions::default(), 43);
        assert_ne!(a, c);
    }

    #[test]
    fn sky_view_is_empty() {
        let rig = Rig::default();
        let w = world(Terrain::Plane);
        let mut v = VehicleState::at(&w.terrain, 3.0, 0.0, 0.0);
        // flip the vehicle so the camera looks up
        v.pose = v.pose.compose(&Pose::from_rotation(crate::geometry::so3_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0))));
        v.pose.translation.z = 5.0;
        let r = render_observations(&w, &rig.ground, &rig.intrinsics, &v, &NoiseConfig::none(), &RenderOptions::default(), 1);
        assert!(r.is_empty());
    }

    #[test]
    fn level_mix_follows_weights() {
        let w = World::generate(Terrain::Plane, (0.0, 0.0, 50.0, 0.0), &WorldConfig::default(), 1);
        let mut counts = [0usize; PYRAMID_LEVELS];
        for l in &w.field.landmarks {
            counts[l.level as usize] += 1;
        }
        let n = w.field.landmarks.len() as f64;
        for (c, want) in counts.iter().zip([0.4, 0.3, 0.2, 0.1]) {
            assert!((*c as f64 / n - want).abs() < 0.01);
        }
        for l in &w.field.landmarks {
            assert_eq!(l.position.z, 0.0);
        }
    }
}
