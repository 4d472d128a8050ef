//! Ground-truth intention and occupancy labels computed from futures.
//!
//! Intention of agent `i` toward the target:
//!
//! 1. `ignored` if the two futures never come within `tau_ignore` at a
//!    common timestep (also for the target itself and agents without a
//!    future);
//! 2. `nearby` if the swept footprints never overlap for any pair of
//!    timesteps;
//! 3. otherwise the conflict point is the midpoint of the first timestep
//!    pair `(t_i, t_tgt)` (lexicographic) whose distance is within
//!    `path_epsilon` of the minimum inter-path distance. Each agent's arrival
//!    is the first step of minimal distance to that point; arriving earlier
//!    than the target by more than `tie_epsilon` is `overtaking`, later is
//!    `yielding`, anything in between is `nearby`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scene::{segment_polylines, AgentTrack, Point, Scenario, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub tau_ignore: f64,
    pub alpha_occ: f64,
    pub footprint_margin: f64,
    pub path_epsilon: f64,
    pub tie_epsilon: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            tau_ignore: 10.0,
            alpha_occ: 2.0,
            footprint_margin: 0.5,
            path_epsilon: 0.5,
            tie_epsilon: 0.2,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_ignore", self.tau_ignore),
            ("alpha_occ", self.alpha_occ),
            ("footprint_margin", self.footprint_margin),
            ("path_epsilon", self.path_epsilon),
            ("tie_epsilon", self.tie_epsilon),
        ] {
            ensure!(v > 0.0 && v.is_finite(), Config, "{name} must be strictly positive, got {v}");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intention {
    Ignored = 0,
    Nearby = 1,
    Overtaking = 2,
    Yielding = 3,
}

impl Intention {
    pub const ALL: [Intention; 4] = [
        Intention::Ignored,
        Intention::Nearby,
        Intention::Overtaking,
        Intention::Yielding,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Intention::Ignored => "ignored",
            Intention::Nearby => "nearby",
            Intention::Overtaking => "overtaking",
            Intention::Yielding => "yielding",
        }
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Point,
    pub heading: f64,
}

/// Oriented-rectangle overlap by the separating-axis test. Each rectangle is
/// `(length + margin) x (width + margin)` centered at its pose; touching
/// rectangles count as intersecting.
pub fn footprints_intersect(a: Pose, extent_a: [f64; 2], b: Pose, extent_b: [f64; 2], margin: f64) -> bool {
    let ha = [(extent_a[0] + margin) / 2.0, (extent_a[1] + margin) / 2.0];
    let hb = [(extent_b[0] + margin) / 2.0, (extent_b[1] + margin) / 2.0];
    let d = [b.position[0] - a.position[0], b.position[1] - a.position[1]];
    if d[0].hypot(d[1]) > ha[0].hypot(ha[1]) + hb[0].hypot(hb[1]) {
        return false;
    }
    let (sa, ca) = a.heading.sin_cos();
    let (sb, cb) = b.heading.sin_cos();
    let axes_a = [[ca, sa], [-sa, ca]];
    let axes_b = [[cb, sb], [-sb, cb]];
    let dot = |u: [f64; 2], v: [f64; 2]| u[0] * v[0] + u[1] * v[1];
    for axis in axes_a.iter().chain(&axes_b) {
        let ra = ha[0] * dot(axes_a[0], *axis).abs() + ha[1] * dot(axes_a[1], *axis).abs();
        let rb = hb[0] * dot(axes_b[0], *axis).abs() + hb[1] * dot(axes_b[1], *axis).abs();
        if dot(d, *axis).abs() > ra + rb {
            return false;
        }
    }
    true
}

/// Heading at each step from `y[t+1] - y[t]`; the last step and
/// stationary steps reuse the previous heading, starting from `initial`.
pub fn footprint_headings(path: &[Point], initial: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(path.len());
    let mut prev = initial;
    for t in 0..path.len() {
        if let Some(n) = path.get(t + 1) {
            let (dx, dy) = (n[0] - path[t][0], n[1] - path[t][1]);
            if dx.hypot(dy) > 1e-9 {
                prev = dy.atan2(dx);
            }
        }
        out.push(prev);
    }
    out
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per polyline: occupied iff some future point lies within `alpha` of some
/// polyline point.
pub fn label_occupancy(polylines: &[Vec<Point>], target_future: &[Point], alpha: f64) -> Result<Vec<bool>> {
    ensure!(!target_future.is_empty(), Input, "target future is empty");
    Ok(polylines
        .iter()
        .map(|pts| {
            target_future
                .iter()
                .any(|y| pts.iter().map(|p| dist(*p, *y)).fold(f64::INFINITY, f64::min) <= alpha)
        })
        .collect())
}

/// Future of one agent as seen by the intention labeler.
#[derive(Clone, Copy, Debug)]
pub struct AgentFuture<'a> {
    /// Empty when the future is unobserved.
    pub positions: &'a [Point],
    pub length: f64,
    pub width: f64,
    /// Heading used before the first informative displacement.
    pub heading: f64,
}

impl<'a> AgentFuture<'a> {
    pub fn from_track(t: &'a AgentTrack) -> Self {
        Self {
            positions: &t.future,
            length: t.length,
            width: t.width,
            heading: t.last_valid_heading().unwrap_or(0.0),
        }
    }
}

pub fn label_intentions(
    agents: &[AgentFuture<'_>],
    target: usize,
    timestep_s: f64,
    cfg: &LabelConfig,
) -> Result<Vec<Intention>> {
    cfg.validate()?;
    ensure!(target < agents.len(), Input, "target index {target} out of range");
    let tgt = &agents[target];
    ensure!(!tgt.positions.is_empty(), Input, "target future is empty");
    let horizon = tgt.positions.len();
    for (i, a) in agents.iter().enumerate() {
        ensure!(
            a.positions.is_empty() || a.positions.len() == horizon,
            Input,
            "agent {i} future has {} steps, target has {horizon}",
            a.positions.len()
        );
    }
    let tgt_headings = footprint_headings(tgt.positions, tgt.heading);
    Ok(agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if i == target || a.positions.is_empty() {
                Intention::Ignored
            } else {
                label_pair(a, tgt, &tgt_headings, timestep_s, cfg)
            }
        })
        .collect())
}

fn label_pair(a: &AgentFuture<'_>, tgt: &AgentFuture<'_>, tgt_headings: &[f64], dt: f64, cfg: &LabelConfig) -> Intention {
    let ya = a.positions;
    let yt = tgt.positions;
    let closest = ya.iter().zip(yt).map(|(p, q)| dist(*p, *q)).fold(f64::INFINITY, f64::min);
    if closest > cfg.tau_ignore {
        return Intention::Ignored;
    }
    let headings = footprint_headings(ya, a.heading);
    let overlap = (0..ya.len()).any(|ti| {
        (0..yt.len()).any(|tj| {
            footprints_intersect(
                Pose {
                    position: ya[ti],
                    heading: headings[ti],
                },
                [a.length, a.width],
                Pose {
                    position: yt[tj],
                    heading: tgt_headings[tj],
                },
                [tgt.length, tgt.width],
                cfg.footprint_margin,
            )
        })
    });
    if !overlap {
        return Intention::Nearby;
    }
    let d_min = ya
        .iter()
        .flat_map(|p| yt.iter().map(move |q| dist(*p, *q)))
        .fold(f64::INFINITY, f64::min);
    let (pi, pj) = (0..ya.len())
        .flat_map(|i| (0..yt.len()).map(move |j| (i, j)))
        .find(|&(i, j)| dist(ya[i], yt[j]) <= d_min + cfg.path_epsilon)
        .expect("minimum is attained");
    let conflict = [(ya[pi][0] + yt[pj][0]) / 2.0, (ya[pi][1] + yt[pj][1]) / 2.0];
    let t_agent = arrival_step(ya, conflict) as f64 * dt;
    let t_target = arrival_step(yt, conflict) as f64 * dt;
    if t_agent < t_target - cfg.tie_epsilon {
        Intention::Overtaking
    } else if t_agent > t_target + cfg.tie_epsilon {
        Intention::Yielding
    } else {
        Intention::Nearby
    }
}

/// First step of minimal distance to `point`.
fn arrival_step(path: &[Point], point: Point) -> usize {
    let mut best = (0, f64::INFINITY);
    for (t, p) in path.iter().enumerate() {
        let d = dist(*p, point);
        if d < best.1 {
            best = (t, d);
        }
    }
    best.0
}

/// Labels for one scenario: one intention per agent, one occupancy flag per
/// segmented polyline (same order as the normalized scene).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub intentions: Vec<Intention>,
    pub occupancy: Vec<bool>,
}

/// JSON form: `{"intentions": [[p0..p3], ...], "occupancy": [0/1, ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelDump {
    pub intentions: Vec<[f64; 4]>,
    pub occupancy: Vec<u8>,
}

impl LabelSet {
    pub fn to_dump(&self) -> LabelDump {
        LabelDump {
            intentions: self.intentions.iter().map(|c| c.one_hot()).collect(),
            occupancy: self.occupancy.iter().map(|&o| o as u8).collect(),
        }
    }

    pub fn from_dump(d: &LabelDump) -> Result<Self> {
        let mut intentions = Vec::with_capacity(d.intentions.len());
        for row in &d.intentions {
            ensure!(
                row.iter().all(|&v| v == 0.0 || v == 1.0) && row.iter().sum::<f64>() == 1.0,
                Input,
                "intention row {:?} is not one-hot",
                row
            );
            let k = row.iter().position(|&v| v == 1.0).expect("one-hot");
            intentions.push(Intention::from_index(k).expect("4 classes"));
        }
        ensure!(d.occupancy.iter().all(|&o| o <= 1), Input, "occupancy flags must be 0 or 1");
        Ok(Self {
            intentions,
            occupancy: d.occupancy.iter().map(|&o| o == 1).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_dump())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_dump(&serde_json::from_str(s)?)
    }
}

pub fn label_scenario(s: &Scenario, cfg: &LabelConfig, scene: &SceneConfig) -> Result<LabelSet> {
    s.validate()?;
    let agents: Vec<AgentFuture<'_>> = s.agents.iter().map(AgentFuture::from_track).collect();
    let intentions = label_intentions(&agents, s.target_index, s.timestep_s, cfg)?;
    let segments = segment_polylines(&s.polylines, scene.points_per_polyline)?;
    let points: Vec<Vec<Point>> = segments.into_iter().map(|seg| seg.points).collect();
    let occupancy = label_occupancy(&points, &s.target().future, cfg.alpha_occ)?;
    Ok(LabelSet { intentions, occupancy })
}

/// Class counts over a corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelStats {
    pub intention_counts: [usize; 4],
    pub occupied: usize,
    pub polylines: usize,
}

impl LabelStats {
    pub fn add(&mut self, l: &LabelSet) {
        for c in &l.intentions {
            self.intention_counts[c.index()] += 1;
        }
        self.occupied += l.occupancy.iter().filter(|&&o| o).count();
        self.polylines += l.occupancy.len();
    }

    pub fn ratio(&self, c: Intention) -> f64 {
        let total: usize = self.intention_counts.iter().sum();
        if total == 0 {
            0.0
        } else {
            self.intention_counts[c.index()] as f64 / total as f64
        }
    }

    /// `class,count,ratio` rows for intentions then occupancy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count,ratio\n");
        for c in Intention::ALL {
            out.push_str(&format!("{},{},{}\n", c.name(), self.intention_counts[c.index()], self.ratio(c)));
        }
        let occ_ratio = if self.polylines == 0 {
            0.0
        } else {
            self.occupied as f64 / self.polylines as f64
        };
        out.push_str(&format!("occupied,{},{}\n", self.occupied, occ_ratio));
        out.push_str(&format!("unoccupied,{},{}\n", self.polylines - self.occupied, 1.0 - occ_ratio));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(start: Point, vel: Point, n: usize, dt: f64) -> Vec<Point> {
        (1..=n)
            .map(|k| [start[0] + vel[0] * dt * k as f64, start[1] + vel[1] * dt * k as f64])
            .collect()
    }

    fn fut(p: &[Point]) -> AgentFuture<'_> {
        AgentFuture {
            positions: p,
            length: 4.5,
            width: 2.0,
            heading: 0.0,
        }
    }

    fn pose(x: f64, y: f64, h: f64) -> Pose {
        Pose {
            position: [x, y],
            heading: h,
        }
    }

    #[test]
    fn identical_poses_intersect() {
        assert!(footprints_intersect(pose(1.0, 2.0, 0.3), [4.0, 2.0], pose(1.0, 2.0, 0.3), [4.0, 2.0], 0.5));
    }

    #[test]
    fn far_apart_centers_do_not_intersect() {
        // Half-diagonals with margin: hypot(2.25, 1.25) ~ 2.57 each.
        assert!(!footprints_intersect(pose(0.0, 0.0, 0.0), [4.0, 2.0], pose(5.2, 0.0, 1.0), [4.0, 2.0], 0.5));
    }

    #[test]
    fn rotated_corner_case() {
        // A diamond whose tip reaches into an axis-aligned square.
        let d = 1.0 + std::f64::consts::SQRT_2 - 0.01;
        assert!(footprints_intersect(pose(0.0, 0.0, 0.0), [2.0, 2.0], pose(d, 0.0, std::f64::consts::FRAC_PI_4), [2.0, 2.0], 0.0));
        let d = 1.0 + std::f64::consts::SQRT_2 + 0.01;
        assert!(!footprints_intersect(pose(0.0, 0.0, 0.0), [2.0, 2.0], pose(d, 0.0, std::f64::consts::FRAC_PI_4), [2.0, 2.0], 0.0));
    }

    fn corners(p: Pose, e: [f64; 2]) -> impl Fn(f64, f64) -> Point {
        let (s, c) = p.heading.sin_cos();
        move |u: f64, v: f64| {
            let (lx, ly) = (u * e[0] / 2.0, v * e[1] / 2.0);
            [p.position[0] + c * lx - s * ly, p.position[1] + s * lx + c * ly]
        }
    }

    fn inside(p: Pose, e: [f64; 2], q: Point) -> bool {
        let (s, c) = p.heading.sin_cos();
        let (dx, dy) = (q[0] - p.position[0], q[1] - p.position[1]);
        (c * dx + s * dy).abs() <= e[0] / 2.0 && (-s * dx + c * dy).abs() <= e[1] / 2.0
    }

    /// Dense point sampling of both rectangles.
    fn sampled(a: Pose, ea: [f64; 2], b: Pose, eb: [f64; 2]) -> bool {
        const N: usize = 48;
        let grid = |p: Pose, e: [f64; 2], other: Pose, eo: [f64; 2]| {
            let at = corners(p, e);
            (0..=N).any(|i| {
                (0..=N).any(|j| inside(other, eo, at(-1.0 + 2.0 * i as f64 / N as f64, -1.0 + 2.0 * j as f64 / N as f64)))
            })
        };
        grid(a, ea, b, eb) || grid(b, eb, a, ea)
    }

    #[test]
    fn sat_agrees_with_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let a = pose(0.0, 0.0, rng.gen_range(-3.2..3.2));
            let b = pose(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-3.2..3.2));
            let ea = [rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.5)];
            let eb = [rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.5)];
            let sat = footprints_intersect(a, ea, b, eb, 0.0);
            if sampled(a, ea, b, eb) {
                assert!(sat, "sampling found overlap SAT missed: {a:?} {ea:?} {b:?} {eb:?}");
            }
            if sat {
                let tol = 0.15;
                let grow = |e: [f64; 2]| [e[0] + tol, e[1] + tol];
                assert!(sampled(a, grow(ea), b, grow(eb)), "SAT overlap not near any sample: {a:?} {ea:?} {b:?} {eb:?}");
            }
        }
    }

    #[test]
    fn occupancy_point_on_path_and_far_polyline() {
        let y = line([0.0, 0.0], [10.0, 0.0], 10, 0.1);
        let on = vec![[3.0, 0.0], [3.0, 5.0]];
        let far = vec![[0.0, 10.0], [10.0, 10.0]];
        assert_eq!(label_occupancy(&[on.clone(), far.clone()], &y, 2.0).unwrap(), vec![true, false]);
        assert_eq!(label_occupancy(&[on], &y, 0.0).unwrap(), vec![true]);
        assert!(label_occupancy(&[far], &[], 2.0).is_err());
    }

    fn crossing(agent_arrival_s: f64, target_arrival_s: f64) -> Vec<Intention> {
        // Target drives +x through the origin; agent drives +y through it.
        // At 5 m/s a 2 s arrival gap keeps the closest common-time distance
        // at 7.07 m, inside the ignore radius.
        let dt = 0.1;
        let speed = 5.0;
        let tgt = line([-speed * target_arrival_s, 0.0], [speed, 0.0], 80, dt);
        let agent = line([0.0, -speed * agent_arrival_s], [0.0, speed], 80, dt);
        let mut a = fut(&agent);
        a.heading = std::f64::consts::FRAC_PI_2;
        label_intentions(&[fut(&tgt), a], 0, dt, &LabelConfig::default()).unwrap()
    }

    #[test]
    fn crossing_arrival_order_decides_overtaking_or_yielding() {
        assert_eq!(crossing(2.0, 4.0)[1], Intention::Overtaking);
        assert_eq!(crossing(4.0, 2.0)[1], Intention::Yielding);
        assert_eq!(crossing(3.0, 3.0)[1], Intention::Nearby);
        assert_eq!(crossing(3.0, 3.0)[0], Intention::Ignored);
    }

    #[test]
    fn far_and_parallel_agents() {
        let dt = 0.1;
        let tgt = line([0.0, 0.0], [10.0, 0.0], 80, dt);
        let far = line([0.0, 50.0], [10.0, 0.0], 80, dt);
        let parallel = line([2.0, 3.5], [10.0, 0.0], 80, dt);
        let labels = label_intentions(&[fut(&tgt), fut(&far), fut(&parallel), fut(&[])], 0, dt, &LabelConfig::default()).unwrap();
        assert_eq!(labels, vec![Intention::Ignored, Intention::Ignored, Intention::Nearby, Intention::Ignored]);
    }

    #[test]
    fn mismatched_horizons_rejected() {
        let a = line([0.0, 0.0], [1.0, 0.0], 10, 0.1);
        let b = line([0.0, 0.0], [1.0, 0.0], 9, 0.1);
        assert!(label_intentions(&[fut(&a), fut(&b)], 0, 0.1, &LabelConfig::default()).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let l = LabelSet {
            intentions: vec![Intention::Ignored, Intention::Yielding],
            occupancy: vec![true, false, true],
        };
        let json = l.to_json().unwrap();
        assert_eq!(json, r#"{"intentions":[[1.0,0.0,0.0,0.0],[0.0,0.0,0.0,1.0]],"occupancy":[1,0,1]}"#);
        assert_eq!(LabelSet::from_json(&json).unwrap(), l);
    }

    #[test]
    fn nonpositive_config_rejected() {
        let cfg = LabelConfig {
            tie_epsilon: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn random_path(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        let start = [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)];
        let vel = [rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0)];
        line(start, vel, n, 0.1)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ignored_set_shrinks_as_tau_grows(seed in any::<u64>(), tau in 1.0f64..30.0, extra in 0.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let paths: Vec<Vec<Point>> = (0..5).map(|_| random_path(&mut rng, 20)).collect();
            let agents: Vec<AgentFuture<'_>> = paths.iter().map(|p| fut(p)).collect();
            let lo = LabelConfig { tau_ignore: tau, ..Default::default() };
            let hi = LabelConfig { tau_ignore: tau + extra, ..Default::default() };
            let a = label_intentions(&agents, 0, 0.1, &lo).unwrap();
            let b = label_intentions(&agents, 0, 0.1, &hi).unwrap();
            for (x, y) in a.iter().zip(&b) {
                if *x != Intention::Ignored {
                    prop_assert_ne!(*y, Intention::Ignored);
                }
            }
        }

        #[test]
        fn occupied_set_grows_with_alpha(seed in any::<u64>(), alpha in 0.1f64..5.0, extra in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_path(&mut rng, 30);
            let polys: Vec<Vec<Point>> = (0..8).map(|_| random_path(&mut rng, 6)).collect();
            let a = label_occupancy(&polys, &y, alpha).unwrap();
            let b = label_occupancy(&polys, &y, alpha + extra).unwrap();
            for (x, z) in a.iter().zip(&b) {
                prop_assert!(!*x || *z);
            }
        }
    }
}
