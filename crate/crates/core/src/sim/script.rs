//! Waypoint scripts standing in for a human driver, and the dense reference
//! path they trace.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScriptError {
    #[error("waypoint {index} is unreachable: {reason}")]
    UnreachableWaypoint { index: usize, reason: String },
    #[error("invalid script: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    /// Heading to turn to on arrival, degrees. Makes the waypoint a stop.
    #[serde(default)]
    pub heading_deg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    pub heading_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Script {
    pub start: StartPose,
    pub waypoints: Vec<Waypoint>,
    /// m/s along lines and arcs.
    pub speed: f64,
    /// 0 turns in place at corners; positive values round corners with arcs.
    pub turn_radius: f64,
    /// deg/s when turning in place.
    pub spin_rate_deg: f64,
    pub frame_rate: f64,
}

impl Default for Script {
    fn default() -> Self {
        Self::straight(10.0, 0.6)
    }
}

impl Script {
    pub fn straight(length: f64, speed: f64) -> Self {
        Self {
            start: StartPose {
                x: 0.0,
                y: 0.0,
                heading_deg: 0.0,
            },
            waypoints: vec![Waypoint {
                x: length,
                y: 0.0,
                heading_deg: None,
            }],
            speed,
            turn_radius: 0.0,
            spin_rate_deg: 15.0,
            frame_rate: 15.0,
        }
    }

    pub fn plan(&self) -> Result<ScriptPath, ScriptError> {
        ScriptPath::new(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Line {
        from: (f64, f64),
        to: (f64, f64),
        heading: f64,
    },
    /// Signed radius: positive turns left.
    Arc {
        from: (f64, f64),
        heading: f64,
        radius: f64,
        sweep: f64,
    },
    Spin {
        at: (f64, f64),
        heading: f64,
        sweep: f64,
    },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Line { from, to, .. } => (to.0 - from.0).hypot(to.1 - from.1),
            Segment::Arc { radius, sweep, .. } => (radius * sweep).abs(),
            Segment::Spin { .. } => 0.0,
        }
    }

    /// Planar pose after travelling fraction `f` of the segment.
    pub fn pose_at(&self, f: f64) -> PlanarPose {
        match *self {
            Segment::Line { from, to, heading } => PlanarPose {
                x: from.0 + f * (to.0 - from.0),
                y: from.1 + f * (to.1 - from.1),
                heading,
            },
            Segment::Arc {
                from,
                heading,
                radius,
                sweep,
            } => {
                let a = heading + f * sweep;
                // centre sits a radius to the left of the start heading
                let cx = from.0 - radius * heading.sin();
                let cy = from.1 + radius * heading.cos();
                PlanarPose {
                    x: cx + radius * a.sin(),
                    y: cy - radius * a.cos(),
                    heading: a,
                }
            }
            Segment::Spin { at, heading, sweep } => PlanarPose {
                x: at.0,
                y: at.1,
                heading: heading + f * sweep,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// A script resolved into timed segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptPath {
    pub segments: Vec<Segment>,
    starts: Vec<f64>,
    durations: Vec<f64>,
    speed: f64,
    spin_rate: f64,
    pub frame_rate: f64,
    start: PlanarPose,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    } else if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

impl ScriptPath {
    pub fn new(script: &Script) -> Result<Self, ScriptError> {
        if !(script.speed > 0.0) {
            return Err(ScriptError::Invalid("speed must be positive"));
        }
        if !(script.spin_rate_deg > 0.0) {
            return Err(ScriptError::Invalid("spin_rate_deg must be positive"));
        }
        if !(script.frame_rate > 0.0) {
            return Err(ScriptError::Invalid("frame_rate must be positive"));
        }
        if !(script.turn_radius >= 0.0) {
            return Err(ScriptError::Invalid("turn_radius must be non-negative"));
        }
        let start = PlanarPose {
            x: script.start.x,
            y: script.start.y,
            heading: script.start.heading_deg.to_radians(),
        };
        let mut segments = Vec::new();
        let mut pos = (start.x, start.y);
        let mut heading = start.heading;
        // Waypoints with a heading end a chain; corners inside a chain are
        // filleted when a turn radius is set.
        let mut chain: Vec<(usize, (f64, f64))> = Vec::new();
        for (i, w) in script.waypoints.iter().enumerate() {
            let p = (w.x, w.y);
            let last = chain.last().map_or(pos, |c| c.1);
            if (p.0 - last.0).hypot(p.1 - last.1) > 1e-9 {
                chain.push((i, p));
            }
            if let Some(h) = w.heading_deg {
                emit_chain(&mut segments, &mut pos, &mut heading, &chain, script.turn_radius)?;
                chain.clear();
                push_spin(&mut segments, pos, &mut heading, h.to_radians());
            }
        }
        emit_chain(&mut segments, &mut pos, &mut heading, &chain, script.turn_radius)?;

        let spin_rate = script.spin_rate_deg.to_radians();
        let durations: Vec<f64> = segments
            .iter()
            .map(|s| match s {
                Segment::Spin { sweep, .. } => sweep.abs() / spin_rate,
                other => other.length() / script.speed,
            })
            .collect();
        let mut starts = Vec::with_capacity(durations.len());
        let mut t = 0.0;
        for d in &durations {
            starts.push(t);
            t += d;
        }
        Ok(Self {
            segments,
            starts,
            durations,
            speed: script.speed,
            spin_rate,
            frame_rate: script.frame_rate,
            start,
        })
    }

    pub fn duration(&self) -> f64 {
        self.starts.last().zip(self.durations.last()).map_or(0.0, |(s, d)| s + d)
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    fn locate(&self, t: f64) -> Option<(usize, f64)> {
        if self.segments.is_empty() {
            return None;
        }
        let t = t.clamp(0.0, self.duration());
        let i = self.starts.partition_point(|&s| s <= t).saturating_sub(1);
        let f = if self.durations[i] > 0.0 {
            ((t - self.starts[i]) / self.durations[i]).clamp(0.0, 1.0)
        } else {
            1.0
        };
        Some((i, f))
    }

    pub fn pose_at(&self, t: f64) -> PlanarPose {
        match self.locate(t) {
            None => self.start,
            Some((i, f)) => self.segments[i].pose_at(f),
        }
    }

    /// Forward speed and yaw rate being executed at time `t`.
    pub fn rates_at(&self, t: f64) -> (f64, f64) {
        match self.locate(t).map(|(i, _)| self.segments[i]) {
            None => (0.0, 0.0),
            Some(Segment::Line { .. }) => (self.speed, 0.0),
            Some(Segment::Arc { radius, sweep, .. }) => (self.speed, self.speed / radius.abs() * sweep.signum()),
            Some(Segment::Spin { sweep, .. }) => (0.0, self.spin_rate * sweep.signum()),
        }
    }

    /// Sample times: every `1 / frame_rate` seconds from zero, with a final
    /// sample clamped to the end of the script.
    pub fn frame_times(&self) -> Vec<f64> {
        let d = self.duration();
        let n = (d * self.frame_rate - 1e-9).ceil().max(0.0) as usize;
        (0..=n).map(|k| (k as f64 / self.frame_rate).min(d)).collect()
    }

    /// Planar polyline through the path with at most `step` metres between
    /// samples (spins collapse to a single point).
    pub fn reference(&self, step: f64) -> ReferencePath {
        let mut pts: Vec<(f64, f64)> = vec![(self.start.x, self.start.y)];
        for s in &self.segments {
            let len = s.length();
            if len == 0.0 {
                continue;
            }
            let n = (len / step).ceil().max(1.0) as usize;
            for k in 1..=n {
                let p = s.pose_at(k as f64 / n as f64);
                pts.push((p.x, p.y));
            }
        }
        ReferencePath::new(pts)
    }
}

fn push_spin(segments: &mut Vec<Segment>, pos: (f64, f64), heading: &mut f64, target: f64) {
    let sweep = wrap_angle(target - *heading);
    if sweep.abs() > 1e-12 {
        segments.push(Segment::Spin {
            at: pos,
            heading: *heading,
            sweep,
        });
    }
    *heading += sweep;
}

fn emit_chain(
    segments: &mut Vec<Segment>,
    pos: &mut (f64, f64),
    heading: &mut f64,
    chain: &[(usize, (f64, f64))],
    radius: f64,
) -> Result<(), ScriptError> {
    if chain.is_empty() {
        return Ok(());
    }
    let mut pts = vec![*pos];
    pts.extend(chain.iter().map(|c| c.1));
    let dirs: Vec<f64> = pts.windows(2).map(|w| (w[1].1 - w[0].1).atan2(w[1].0 - w[0].0)).collect();
    let lens: Vec<f64> = pts.windows(2).map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1)).collect();

    push_spin(segments, *pos, heading, dirs[0]);

    if radius == 0.0 {
        for (leg, &(_, p)) in chain.iter().enumerate() {
            if leg > 0 {
                push_spin(segments, pts[leg], heading, dirs[leg]);
            }
            segments.push(Segment::Line {
                from: pts[leg],
                to: p,
                heading: dirs[leg],
            });
        }
        *pos = pts[pts.len() - 1];
        return Ok(());
    }

    // corner k sits at pts[k + 1], between legs k and k + 1
    let turns: Vec<f64> = dirs.windows(2).map(|w| wrap_angle(w[1] - w[0])).collect();
    let trims: Vec<f64> = turns
        .iter()
        .zip(chain)
        .map(|(t, &(index, _))| {
            if t.abs() > PI - 1e-6 {
                return Err(ScriptError::UnreachableWaypoint {
                    index,
                    reason: "reversal cannot be filleted".into(),
                });
            }
            Ok(radius * (t.abs() / 2.0).tan())
        })
        .collect::<Result<_, _>>()?;
    for leg in 0..lens.len() {
        let head_trim = if leg > 0 { trims[leg - 1] } else { 0.0 };
        let tail_trim = trims.get(leg).copied().unwrap_or(0.0);
        if head_trim + tail_trim > lens[leg] + 1e-9 {
            return Err(ScriptError::UnreachableWaypoint {
                index: chain[leg].0,
                reason: format!("turn radius {radius} m does not fit a {:.3} m leg", lens[leg]),
            });
        }
        let (c, s) = (dirs[leg].cos(), dirs[leg].sin());
        let from = (pts[leg].0 + head_trim * c, pts[leg].1 + head_trim * s);
        let to = (pts[leg + 1].0 - tail_trim * c, pts[leg + 1].1 - tail_trim * s);
        if (to.0 - from.0).hypot(to.1 - from.1) > 1e-12 {
            segments.push(Segment::Line {
                from,
                to,
                heading: dirs[leg],
            });
        }
        if leg < turns.len() && turns[leg].abs() > 1e-12 {
            let t = turns[leg];
            segments.push(Segment::Arc {
                from: to,
                heading: dirs[leg],
                radius: radius * t.signum(),
                sweep: t,
            });
        }
    }
    *pos = pts[pts.len() - 1];
    *heading = dirs[dirs.len() - 1];
    Ok(())
}

/// Dense planar polyline used to measure true cross-track error.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePath {
    pub points: Vec<(f64, f64)>,
    /// Arc length at each point.
    pub distance: Vec<f64>,
}

impl ReferencePath {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        let mut distance = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                let q = points[i - 1];
                acc += (p.0 - q.0).hypot(p.1 - q.1);
            }
            distance.push(acc);
        }
        Self { points, distance }
    }

    pub fn length(&self) -> f64 {
        self.distance.last().copied().unwrap_or(0.0)
    }

    /// Signed distance to the closest point (left positive) searched within
    /// `window` samples of `hint`. Returns (error, segment index, arc length).
    pub fn cross_track(&self, x: f64, y: f64, hint: usize, window: usize) -> (f64, usize, f64) {
        if self.points.len() < 2 {
            let p = self.points.first().copied().unwrap_or((0.0, 0.0));
            return ((x - p.0).hypot(y - p.1), 0, 0.0);
        }
        let segs = self.points.len() - 1;
        let lo = hint.saturating_sub(window);
        let hi = (hint + window).min(segs - 1);
        let mut best = (f64::INFINITY, 0.0, lo, 0.0);
        for i in lo..=hi {
            let a = self.points[i];
            let b = self.points[i + 1];
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let l2 = dx * dx + dy * dy;
            if l2 == 0.0 {
                continue;
            }
            let f = (((x - a.0) * dx + (y - a.1) * dy) / l2).clamp(0.0, 1.0);
            let (px, py) = (a.0 + f * dx, a.1 + f * dy);
            let d = (x - px).hypot(y - py);
            if d < best.0 {
                let side = dx * (y - a.1) - dy * (x - a.0);
                let signed = if side >= 0.0 { d } else { -d };
                best = (d, signed, i, self.distance[i] + f * l2.sqrt());
            }
        }
        (best.1, best.2, best.3)
    }
}
