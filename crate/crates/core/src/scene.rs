//! Scenario data model, agent-centric normalization, and the three model
//! inputs: agent histories, map polylines and target-to-polyline relative
//! movement.
//!
//! Feature layouts are fixed so checkpoints stay portable.
//!
//! Agent channels (30 per history step):
//!
//! | offset | width | content                                  |
//! |-------:|------:|------------------------------------------|
//! | 0      | 2     | position in the target frame             |
//! | 2      | 2     | displacement from the previous step      |
//! | 4      | 2     | heading cos / sin                        |
//! | 6      | 2     | velocity                                 |
//! | 8      | 1     | speed                                    |
//! | 9      | 2     | length, width                            |
//! | 11     | 3     | type one-hot (vehicle, pedestrian, cyclist) |
//! | 14     | 1     | validity                                 |
//! | 15     | 11    | time-index one-hot                       |
//! | 26     | 1     | yaw rate                                 |
//! | 27     | 3     | zero padding                             |
//!
//! Invalid steps are all-zero rows. The displacement of the first step (or
//! after an invalid step) falls back to `velocity * dt`.
//!
//! Polyline point channels (9): position (2), unit direction to the next
//! point (2), vector to the next point (2), lane-type one-hot (3).

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const HISTORY_STEPS: usize = 11;
pub const FUTURE_STEPS: usize = 80;
pub const AGENT_FEATURES: usize = 30;
pub const POINT_FEATURES: usize = 9;
pub const RELATIVE_FEATURES: usize = 4;
pub const DEFAULT_POINTS_PER_POLYLINE: usize = 20;
pub const DEFAULT_TIMESTEP_S: f64 = 0.1;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentType {
    fn one_hot_index(self) -> usize {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Pedestrian => 1,
            AgentType::Cyclist => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneType {
    Center,
    Boundary,
    Crosswalk,
}

impl LaneType {
    fn one_hot_index(self) -> usize {
        match self {
            LaneType::Center => 0,
            LaneType::Boundary => 1,
            LaneType::Crosswalk => 2,
        }
    }
}

/// One observed state; serialized as `[x, y, heading, vx, vy, valid]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

impl From<[f64; 6]> for AgentState {
    fn from(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            heading: a[2],
            vx: a[3],
            vy: a[4],
            valid: a[5] != 0.0,
        }
    }
}

impl From<AgentState> for [f64; 6] {
    fn from(s: AgentState) -> Self {
        [s.x, s.y, s.heading, s.vx, s.vy, if s.valid { 1.0 } else { 0.0 }]
    }
}

impl AgentState {
    pub fn position(&self) -> Point {
        [self.x, self.y]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTrack {
    pub history: Vec<AgentState>,
    /// Ground-truth future positions; empty when unknown.
    pub future: Vec<Point>,
    pub length: f64,
    pub width: f64,
    #[serde(rename = "type")]
    pub agent_type: AgentType,
}

impl AgentTrack {
    pub fn current(&self) -> &AgentState {
        self.history.last().expect("validated history")
    }

    /// Heading at the last valid history step, if any.
    pub fn last_valid_heading(&self) -> Option<f64> {
        self.history.iter().rev().find(|s| s.valid).map(|s| s.heading)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapPolyline {
    pub points: Vec<Point>,
    pub lane_type: LaneType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub timestep_s: f64,
    pub target_index: usize,
    pub agents: Vec<AgentTrack>,
    pub polylines: Vec<MapPolyline>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.timestep_s > 0.0, Input, "timestep_s must be positive");
        ensure!(!self.agents.is_empty(), Input, "scenario has no agents");
        ensure!(
            self.target_index < self.agents.len(),
            Input,
            "target_index {} out of range for {} agents",
            self.target_index,
            self.agents.len()
        );
        ensure!(!self.polylines.is_empty(), Input, "scenario has no polylines");
        let horizon = self.agents[self.target_index].future.len();
        for (i, a) in self.agents.iter().enumerate() {
            ensure!(
                a.history.len() == HISTORY_STEPS,
                Input,
                "agent {i} has {} history steps, expected {HISTORY_STEPS}",
                a.history.len()
            );
            ensure!(a.length > 0.0 && a.width > 0.0, Input, "agent {i} has non-positive extent");
            ensure!(
                a.history
                    .iter()
                    .filter(|s| s.valid)
                    .all(|s| [s.x, s.y, s.heading, s.vx, s.vy].iter().all(|v| v.is_finite())),
                Input,
                "agent {i} has non-finite valid state"
            );
            ensure!(
                a.future.is_empty() || a.future.len() == horizon,
                Input,
                "agent {i} future has {} steps, target has {horizon}",
                a.future.len()
            );
            ensure!(
                a.future.iter().flatten().all(|v| v.is_finite()),
                Input,
                "agent {i} has non-finite future"
            );
        }
        for (j, p) in self.polylines.iter().enumerate() {
            ensure!(p.points.len() >= 2, Input, "polyline {j} has fewer than 2 points");
            ensure!(
                p.points.iter().flatten().all(|v| v.is_finite()),
                Input,
                "polyline {j} has non-finite points"
            );
        }
        Ok(())
    }

    pub fn target(&self) -> &AgentTrack {
        &self.agents[self.target_index]
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Applies the rigid motion `p -> R(rotation) p + translation` to every
    /// coordinate, heading and velocity.
    pub fn transformed(&self, rotation: f64, translation: Point) -> Scenario {
        let (s, c) = rotation.sin_cos();
        let rot = |p: Point| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let mv = |p: Point| {
            let r = rot(p);
            [r[0] + translation[0], r[1] + translation[1]]
        };
        let mut out = self.clone();
        for a in &mut out.agents {
            for st in &mut a.history {
                let p = mv([st.x, st.y]);
                let v = rot([st.vx, st.vy]);
                st.x = p[0];
                st.y = p[1];
                st.vx = v[0];
                st.vy = v[1];
                st.heading += rotation;
            }
            for f in &mut a.future {
                *f = mv(*f);
            }
        }
        for p in &mut out.polylines {
            for q in &mut p.points {
                *q = mv(*q);
            }
        }
        out
    }
}

/// Rigid transform from the raw scene frame into the target-centric frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: Point,
    pub heading: f64,
}

impl Frame {
    pub fn identity() -> Self {
        Self {
            origin: [0.0, 0.0],
            heading: 0.0,
        }
    }

    pub fn to_local(&self, p: Point) -> Point {
        self.rotate_to_local([p[0] - self.origin[0], p[1] - self.origin[1]])
    }

    pub fn to_global(&self, p: Point) -> Point {
        let r = self.rotate_to_global(p);
        [r[0] + self.origin[0], r[1] + self.origin[1]]
    }

    pub fn rotate_to_local(&self, v: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    pub fn rotate_to_global(&self, v: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn heading_to_local(&self, h: f64) -> f64 {
        wrap_angle(h - self.heading)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// A map polyline cut to at most `N_p` points.
#[derive(Clone, Debug, PartialEq)]
pub struct PolylineSegment {
    /// Index of the originating [`MapPolyline`].
    pub source: usize,
    pub points: Vec<Point>,
    pub lane_type: LaneType,
}

impl PolylineSegment {
    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }

    /// Direction angle from the first to the last point (0 when degenerate).
    pub fn direction(&self) -> f64 {
        let (a, b) = (self.points[0], self.points[self.points.len() - 1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        if dx == 0.0 && dy == 0.0 {
            0.0
        } else {
            dy.atan2(dx)
        }
    }
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

/// Splits polylines longer than `max_points` into consecutive chunks that
/// share their boundary point; shorter polylines are kept whole.
pub fn segment_polylines(polylines: &[MapPolyline], max_points: usize) -> Result<Vec<PolylineSegment>> {
    ensure!(max_points >= 2, Config, "points per polyline must be at least 2");
    let mut out = Vec::new();
    for (j, p) in polylines.iter().enumerate() {
        let mut start = 0;
        loop {
            let end = (start + max_points).min(p.points.len());
            out.push(PolylineSegment {
                source: j,
                points: p.points[start..end].to_vec(),
                lane_type: p.lane_type,
            });
            if end == p.points.len() {
                break;
            }
            start = end - 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub points_per_polyline: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            points_per_polyline: DEFAULT_POINTS_PER_POLYLINE,
        }
    }
}

/// Model-ready view of a scenario in the target-centric frame.
#[derive(Clone, Debug)]
pub struct NormalizedScene {
    pub frame: Frame,
    pub target_index: usize,
    pub timestep_s: f64,
    /// `[N_a, T_p, 30]`.
    pub agents: Tensor,
    /// `[N_l, N_p, 9]`, zero-padded.
    pub polylines: Tensor,
    /// `N_l * N_p` flags marking real (non-padding) points.
    pub point_valid: Vec<bool>,
    /// `[N_l, T_p, 4]`.
    pub relative: Tensor,
    /// Latest observed position of every agent (token positions).
    pub agent_positions: Vec<Point>,
    pub polyline_centroids: Vec<Point>,
    /// Segmented polylines in the normalized frame.
    pub segments: Vec<PolylineSegment>,
    /// Target future in the normalized frame, when known.
    pub target_future: Option<Vec<Point>>,
}

impl NormalizedScene {
    pub fn num_agents(&self) -> usize {
        self.agents.shape()[0]
    }

    pub fn num_polylines(&self) -> usize {
        self.polylines.shape()[0]
    }

    pub fn points_per_polyline(&self) -> usize {
        self.polylines.shape()[1]
    }

    pub fn denormalize(&self, p: Point) -> Point {
        self.frame.to_global(p)
    }
}

/// The target-centric frame of a scenario: origin at the target's current
/// position, +x along its current heading.
pub fn target_frame(s: &Scenario) -> Result<Frame> {
    let cur = s
        .agents
        .get(s.target_index)
        .ok_or_else(|| Error::Input("target_index out of range".into()))?
        .current();
    if !cur.valid || !(cur.x.is_finite() && cur.y.is_finite() && cur.heading.is_finite()) {
        return Err(Error::Input("target has no valid current pose".into()));
    }
    Ok(Frame {
        origin: [cur.x, cur.y],
        heading: cur.heading,
    })
}

pub fn normalize_scene(s: &Scenario, cfg: &SceneConfig) -> Result<NormalizedScene> {
    s.validate()?;
    let frame = target_frame(s)?;
    let agents = build_agent_features(s, &frame)?;
    let segments: Vec<PolylineSegment> = segment_polylines(&s.polylines, cfg.points_per_polyline)?
        .into_iter()
        .map(|seg| PolylineSegment {
            points: seg.points.iter().map(|&p| frame.to_local(p)).collect(),
            ..seg
        })
        .collect();
    let (polylines, point_valid) = build_polyline_features(&segments, cfg.points_per_polyline)?;
    let target_poses: Vec<Option<(Point, f64)>> = s
        .target()
        .history
        .iter()
        .map(|st| st.valid.then(|| (frame.to_local(st.position()), frame.heading_to_local(st.heading))))
        .collect();
    let relative = compute_relative_movement(&target_poses, &segments)?;
    let agent_positions = s
        .agents
        .iter()
        .map(|a| {
            a.history
                .iter()
                .rev()
                .find(|st| st.valid)
                .map_or([0.0, 0.0], |st| frame.to_local(st.position()))
        })
        .collect();
    let polyline_centroids = segments.iter().map(PolylineSegment::centroid).collect();
    let target_future = (!s.target().future.is_empty())
        .then(|| s.target().future.iter().map(|&p| frame.to_local(p)).collect());
    Ok(NormalizedScene {
        frame,
        target_index: s.target_index,
        timestep_s: s.timestep_s,
        agents,
        polylines,
        point_valid,
        relative,
        agent_positions,
        polyline_centroids,
        segments,
        target_future,
    })
}

/// `[N_a, T_p, 30]` agent history features in `frame`.
pub fn build_agent_features(s: &Scenario, frame: &Frame) -> Result<Tensor> {
    let n = s.agents.len();
    let dt = s.timestep_s;
    let mut values = vec![0.0; n * HISTORY_STEPS * AGENT_FEATURES];
    for (i, a) in s.agents.iter().enumerate() {
        ensure!(a.history.len() == HISTORY_STEPS, Input, "agent {i} history length");
        for (t, st) in a.history.iter().enumerate() {
            if !st.valid {
                continue;
            }
            let row = &mut values[(i * HISTORY_STEPS + t) * AGENT_FEATURES..][..AGENT_FEATURES];
            let p = frame.to_local(st.position());
            let v = frame.rotate_to_local([st.vx, st.vy]);
            let prev = (t > 0).then(|| &a.history[t - 1]).filter(|p| p.valid);
            let delta = match prev {
                Some(pr) => {
                    let q = frame.to_local(pr.position());
                    [p[0] - q[0], p[1] - q[1]]
                }
                None => [v[0] * dt, v[1] * dt],
            };
            let h = frame.heading_to_local(st.heading);
            row[0] = p[0];
            row[1] = p[1];
            row[2] = delta[0];
            row[3] = delta[1];
            row[4] = h.cos();
            row[5] = h.sin();
            row[6] = v[0];
            row[7] = v[1];
            row[8] = v[0].hypot(v[1]);
            row[9] = a.length;
            row[10] = a.width;
            row[11 + a.agent_type.one_hot_index()] = 1.0;
            row[14] = 1.0;
            row[15 + t] = 1.0;
            row[26] = prev.map_or(0.0, |pr| wrap_angle(st.heading - pr.heading) / dt);
        }
    }
    Tensor::new(vec![n, HISTORY_STEPS, AGENT_FEATURES], values)
}

/// `[N_l, N_p, 9]` point features plus the validity mask.
pub fn build_polyline_features(segments: &[PolylineSegment], n_p: usize) -> Result<(Tensor, Vec<bool>)> {
    let n_l = segments.len();
    let mut values = vec![0.0; n_l * n_p * POINT_FEATURES];
    let mut valid = vec![false; n_l * n_p];
    for (j, seg) in segments.iter().enumerate() {
        ensure!(
            seg.points.len() <= n_p && seg.points.len() >= 2,
            Input,
            "segment {j} has {} points (capacity {n_p})",
            seg.points.len()
        );
        let mut last_dir = [1.0, 0.0];
        for (k, p) in seg.points.iter().enumerate() {
            let row = &mut values[(j * n_p + k) * POINT_FEATURES..][..POINT_FEATURES];
            let next = seg.points.get(k + 1).map(|q| [q[0] - p[0], q[1] - p[1]]);
            let dir = match next {
                Some(d) => {
                    let len = d[0].hypot(d[1]);
                    if len > 0.0 {
                        [d[0] / len, d[1] / len]
                    } else {
                        last_dir
                    }
                }
                None => last_dir,
            };
            last_dir = dir;
            let to_next = next.unwrap_or([0.0, 0.0]);
            row[0] = p[0];
            row[1] = p[1];
            row[2] = dir[0];
            row[3] = dir[1];
            row[4] = to_next[0];
            row[5] = to_next[1];
            row[6 + seg.lane_type.one_hot_index()] = 1.0;
            valid[j * n_p + k] = true;
        }
    }
    Ok((Tensor::new(vec![n_l, n_p, POINT_FEATURES], values)?, valid))
}

/// `[N_l, T_p, 4]`: displacement from the target pose at each history step
/// to each polyline centroid, and cos/sin of the polyline direction minus
/// the target heading. Steps where the target is unobserved are zero rows.
pub fn compute_relative_movement(
    target_poses: &[Option<(Point, f64)>],
    segments: &[PolylineSegment],
) -> Result<Tensor> {
    let t_p = target_poses.len();
    ensure!(t_p >= 1, Input, "target history is empty");
    let mut values = vec![0.0; segments.len() * t_p * RELATIVE_FEATURES];
    for (j, seg) in segments.iter().enumerate() {
        let c = seg.centroid();
        let dir = seg.direction();
        for (t, pose) in target_poses.iter().enumerate() {
            let Some((p, h)) = pose else { continue };
            let row = &mut values[(j * t_p + t) * RELATIVE_FEATURES..][..RELATIVE_FEATURES];
            let dtheta = dir - h;
            row[0] = c[0] - p[0];
            row[1] = c[1] - p[1];
            row[2] = dtheta.cos();
            row[3] = dtheta.sin();
        }
    }
    Tensor::new(vec![segments.len(), t_p, RELATIVE_FEATURES], values)
}
