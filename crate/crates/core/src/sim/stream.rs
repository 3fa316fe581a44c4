//! Replayable binary log of a frame stream.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::vehicle::VehicleState;
use super::{Frame, Rendered};
use crate::format::{decode, encode, write_atomic, BodyReader, BodyWriter, FormatError};
use crate::geometry::{PixelObservation, Pose};

pub const FRAME_LOG_MAGIC: &[u8; 8] = b"MVTRFRM\0";
pub const FRAME_LOG_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    frame_count: usize,
}

fn put_pose(w: &mut BodyWriter, p: &Pose) {
    w.f64s(p.rotation.iter());
    w.f64s(p.translation.iter());
}

fn get_pose(r: &mut BodyReader<'_>) -> Result<Pose, FormatError> {
    let mut rot = [0.0; 9];
    let mut t = [0.0; 3];
    r.f64s(&mut rot)?;
    r.f64s(&mut t)?;
    Ok(Pose {
        rotation: Matrix3::from_column_slice(&rot),
        translation: Vector3::from_column_slice(&t),
    })
}

pub fn encode_frames(frames: &[Frame]) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        frame_count: frames.len(),
    })
    .expect("header serialises");
    let mut w = BodyWriter::default();
    for f in frames {
        w.u64(f.index as u64);
        w.f64(f.time);
        put_pose(&mut w, &f.vehicle.pose);
        w.f64(f.vehicle.heading);
        w.f64(f.vehicle.speed);
        w.f64(f.vehicle.steering);
        w.u64(f.rendered.len() as u64);
        for ((o, id), p) in f.rendered.observations.iter().zip(&f.rendered.landmark_ids).zip(&f.rendered.camera_points) {
            w.f64s([o.u, o.v, o.sigma_u, o.sigma_v].iter());
            w.u64(*id as u64);
            w.f64s(p.iter());
            w.u64(o.descriptor.len() as u64);
            w.f64s(o.descriptor.iter());
        }
    }
    encode(FRAME_LOG_MAGIC, FRAME_LOG_VERSION, &header, &w.bytes)
}

pub fn decode_frames(bytes: &[u8]) -> Result<Vec<Frame>, FormatError> {
    let (header, body) = decode(bytes, FRAME_LOG_MAGIC, FRAME_LOG_VERSION)?;
    let header: Header = serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut r = BodyReader::new(body);
    r.expect_at_least(header.frame_count, 8 * 17)?;
    let mut frames = Vec::with_capacity(header.frame_count);
    for _ in 0..header.frame_count {
        let index = r.usize()?;
        let time = r.f64()?;
        let pose = get_pose(&mut r)?;
        let vehicle = VehicleState {
            pose,
            heading: r.f64()?,
            speed: r.f64()?,
            steering: r.f64()?,
        };
        let n = r.usize()?;
        r.expect_at_least(n, 8 * 9)?;
        let mut rendered = Rendered {
            observations: Vec::with_capacity(n),
            landmark_ids: Vec::with_capacity(n),
            camera_points: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let mut px = [0.0; 4];
            r.f64s(&mut px)?;
            rendered.landmark_ids.push(r.usize()?);
            let mut p = [0.0; 3];
            r.f64s(&mut p)?;
            rendered.camera_points.push(Vector3::from_column_slice(&p));
            let d = r.usize()?;
            r.expect_at_least(d, 8)?;
            let mut descriptor = vec![0.0; d];
            r.f64s(&mut descriptor)?;
            rendered.observations.push(PixelObservation {
                u: px[0],
                v: px[1],
                sigma_u: px[2],
                sigma_v: px[3],
                descriptor,
            });
        }
        frames.push(Frame {
            index,
            time,
            vehicle,
            rendered,
        });
    }
    r.finish()?;
    Ok(frames)
}

pub fn save_frames(frames: &[Frame], path: &Path) -> Result<(), FormatError> {
    Ok(write_atomic(path, &encode_frames(frames))?)
}

pub fn load_frames(path: &Path) -> Result<Vec<Frame>, FormatError> {
    decode_frames(&std::fs::read(path)?)
}
