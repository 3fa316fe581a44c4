//! Unicycle kinematics draped over a terrain surface.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::terrain::Terrain;
use crate::geometry::Pose;

/// Forward speed and yaw rate, in the vehicle's own frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub speed: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// vehicle -> world
    pub pose: Pose,
    /// Planar heading of the x axis, radians from world x.
    pub heading: f64,
    pub speed: f64,
    /// Commanded yaw rate, rad/s.
    pub steering: f64,
}

impl VehicleState {
    pub fn at(terrain: &Terrain, x: f64, y: f64, heading: f64) -> Self {
        Self {
            pose: pose_on_terrain(terrain, x, y, heading),
            heading,
            speed: 0.0,
            steering: 0.0,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

/// Vehicle frame resting on the surface at planar position `(x, y)`: z along
/// the surface normal, x the heading direction lifted onto the tangent plane.
pub fn pose_on_terrain(terrain: &Terrain, x: f64, y: f64, heading: f64) -> Pose {
    let (h, gx, gy) = terrain.height_and_gradient(x, y);
    let (s, c) = heading.sin_cos();
    let ax = Vector3::new(c, s, gx * c + gy * s).normalize();
    let az = Vector3::new(-gx, -gy, 1.0).normalize();
    let ay = az.cross(&ax);
    Pose {
        rotation: Matrix3::from_columns(&[ax, ay, az]),
        translation: Vector3::new(x, y, h),
    }
}

/// Integrates the planar unicycle exactly over `dt`, then drapes the result
/// onto the terrain.
pub fn advance_vehicle(terrain: &Terrain, state: &VehicleState, command: &Command, dt: f64) -> VehicleState {
    assert!(dt > 0.0, "dt must be positive");
    if command.speed == 0.0 && command.yaw_rate == 0.0 {
        return VehicleState {
            speed: 0.0,
            steering: 0.0,
            ..*state
        };
    }
    let (x, y) = (state.pose.translation.x, state.pose.translation.y);
    let psi = state.heading;
    let dpsi = command.yaw_rate * dt;
    let (nx, ny) = if dpsi.abs() < 1e-12 {
        let d = command.speed * dt;
        (x + d * psi.cos(), y + d * psi.sin())
    } else {
        let r = command.speed / command.yaw_rate;
        (
            x + r * ((psi + dpsi).sin() - psi.sin()),
            y - r * ((psi + dpsi).cos() - psi.cos()),
        )
    };
    let heading = psi + dpsi;
    VehicleState {
        pose: pose_on_terrain(terrain, nx, ny, heading),
        heading,
        speed: command.speed,
        steering: command.yaw_rate,
    }
}
