//! Synthetic scenarios on a four-way lane grid, with analytic
//! constant-speed futures.
//!
//! The map is a horizontal and a vertical four-lane road crossing at the
//! origin (lane centers at ±1.75 m and ±5.25 m), road edges at ±7 m and a
//! crosswalk on each approach. Every scenario has a target, one archetype
//! partner, and distant filler agents that never come near the target.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scene::{
    AgentState, AgentTrack, AgentType, LaneType, MapPolyline, Point, Scenario, DEFAULT_TIMESTEP_S, FUTURE_STEPS,
    HISTORY_STEPS,
};

pub const LANE_WIDTH: f64 = 3.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Crossing,
    Merging,
    Parallel,
    Following,
    Static,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::Crossing,
        Archetype::Merging,
        Archetype::Parallel,
        Archetype::Following,
        Archetype::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Crossing => "crossing",
            Archetype::Merging => "merging",
            Archetype::Parallel => "parallel",
            Archetype::Following => "following",
            Archetype::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown archetype {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub count: usize,
    /// Archetypes cycled over scenario indices.
    pub archetypes: Vec<Archetype>,
    pub min_agents: usize,
    pub max_agents: usize,
    /// Half-size of the square map, meters.
    pub map_extent: f64,
    /// Spacing of lane sample points, meters.
    pub point_spacing: f64,
    /// Standard deviation of history position noise, meters.
    pub position_noise: f64,
    /// Standard deviation of history heading noise, radians.
    pub heading_noise: f64,
    /// Probability that each of the oldest history steps is unobserved.
    pub dropout_prob: f64,
    pub future_steps: usize,
    pub timestep_s: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 20,
            archetypes: Archetype::ALL.to_vec(),
            min_agents: 6,
            max_agents: 9,
            map_extent: 60.0,
            point_spacing: 2.5,
            position_noise: 0.02,
            heading_noise: 0.005,
            dropout_prob: 0.1,
            future_steps: FUTURE_STEPS,
            timestep_s: DEFAULT_TIMESTEP_S,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.count >= 1, Config, "count must be at least 1");
        ensure!(!self.archetypes.is_empty(), Config, "no archetypes");
        ensure!(
            self.min_agents >= 2 && self.min_agents <= self.max_agents,
            Config,
            "agent range {}..={} invalid (need at least target and partner)",
            self.min_agents,
            self.max_agents
        );
        ensure!(
            self.map_extent > 20.0 && self.point_spacing > 0.0,
            Config,
            "map extent and spacing must be positive (extent > 20 m)"
        );
        ensure!(
            self.position_noise >= 0.0 && self.heading_noise >= 0.0,
            Config,
            "noise scales must be non-negative"
        );
        ensure!((0.0..1.0).contains(&self.dropout_prob), Config, "dropout_prob must be in [0, 1)");
        ensure!(self.future_steps >= 1 && self.timestep_s > 0.0, Config, "invalid time base");
        Ok(())
    }
}

/// Arc-length parametrized path.
#[derive(Clone, Copy, Debug)]
enum Path2 {
    Straight {
        start: Point,
        heading: f64,
    },
    /// Straight for `before` meters, then a circular turn of `angle`.
    Turn {
        start: Point,
        heading: f64,
        before: f64,
        radius: f64,
        angle: f64,
    },
    /// Lateral shift of `offset` (left positive) blended over `[from, from+len]`.
    LaneChange {
        start: Point,
        heading: f64,
        offset: f64,
        from: f64,
        len: f64,
    },
}

impl Path2 {
    fn at(&self, s: f64) -> Point {
        match *self {
            Path2::Straight { start, heading } => [start[0] + s * heading.cos(), start[1] + s * heading.sin()],
            Path2::Turn {
                start,
                heading,
                before,
                radius,
                angle,
            } => {
                if s <= before {
                    return [start[0] + s * heading.cos(), start[1] + s * heading.sin()];
                }
                let p0 = [start[0] + before * heading.cos(), start[1] + before * heading.sin()];
                let arc = radius * angle.abs();
                let side = angle.signum();
                let center = [p0[0] - side * radius * heading.sin(), p0[1] + side * radius * heading.cos()];
                let u = (s - before).min(arc);
                let phi = heading - side * FRAC_PI_2 + side * u / radius;
                let p = [center[0] + radius * phi.cos(), center[1] + radius * phi.sin()];
                if s <= before + arc {
                    p
                } else {
                    let h = heading + angle;
                    let rest = s - before - arc;
                    [p[0] + rest * h.cos(), p[1] + rest * h.sin()]
                }
            }
            Path2::LaneChange {
                start,
                heading,
                offset,
                from,
                len,
            } => {
                let w = ((s - from) / len).clamp(0.0, 1.0);
                let lat = offset * (1.0 - (PI * w).cos()) / 2.0;
                [
                    start[0] + s * heading.cos() - lat * heading.sin(),
                    start[1] + s * heading.sin() + lat * heading.cos(),
                ]
            }
        }
    }

    fn heading_at(&self, s: f64) -> f64 {
        let h = 1e-4;
        let (a, b) = (self.at(s - h), self.at(s + h));
        (b[1] - a[1]).atan2(b[0] - a[0])
    }
}

/// One agent: a path, a speed and an arc-length offset at the current step.
#[derive(Clone, Copy, Debug)]
struct Mover {
    path: Path2,
    speed: f64,
    s0: f64,
    length: f64,
    width: f64,
    kind: AgentType,
}

impl Mover {
    fn track(&self, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> AgentTrack {
        let dt = cfg.timestep_s;
        let mut history = Vec::with_capacity(HISTORY_STEPS);
        let dropped = if rng.gen::<f64>() < cfg.dropout_prob {
            rng.gen_range(1..=4)
        } else {
            0
        };
        for t in 0..HISTORY_STEPS {
            let s = self.s0 + self.speed * dt * (t as f64 - (HISTORY_STEPS - 1) as f64);
            let p = self.path.at(s);
            let h = if self.speed > 0.0 {
                self.path.heading_at(s)
            } else {
                self.path.heading_at(self.s0)
            };
            let noisy = |rng: &mut ChaCha8Rng, sd: f64| if sd > 0.0 { gaussian(rng) * sd } else { 0.0 };
            let (nx, ny, nh) = (
                noisy(rng, cfg.position_noise),
                noisy(rng, cfg.position_noise),
                noisy(rng, cfg.heading_noise),
            );
            let current = t == HISTORY_STEPS - 1;
            history.push(AgentState {
                x: p[0] + nx,
                y: p[1] + ny,
                heading: h + nh,
                vx: self.speed * h.cos(),
                vy: self.speed * h.sin(),
                valid: current || t >= dropped,
            });
        }
        let future = (1..=cfg.future_steps)
            .map(|k| self.path.at(self.s0 + self.speed * dt * k as f64))
            .collect();
        AgentTrack {
            history,
            future,
            length: self.length,
            width: self.width,
            agent_type: self.kind,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn vehicle(path: Path2, speed: f64, s0: f64, rng: &mut ChaCha8Rng) -> Mover {
    Mover {
        path,
        speed,
        s0,
        length: rng.gen_range(4.0..5.0),
        width: rng.gen_range(1.8..2.1),
        kind: AgentType::Vehicle,
    }
}

/// Lane centers of one direction: +1 drives toward +axis on the right side.
fn lane_offset(inner: bool, dir: f64) -> f64 {
    let off = if inner { LANE_WIDTH / 2.0 } else { 1.5 * LANE_WIDTH };
    -dir * off
}

pub fn grid_map(extent: f64, spacing: f64) -> Vec<MapPolyline> {
    let n = (2.0 * extent / spacing).round() as usize;
    let line = |fixed: f64, horizontal: bool, lane_type: LaneType| MapPolyline {
        points: (0..=n)
            .map(|i| {
                let v = -extent + 2.0 * extent * i as f64 / n as f64;
                if horizontal {
                    [v, fixed]
                } else {
                    [fixed, v]
                }
            })
            .collect(),
        lane_type,
    };
    let mut out = Vec::new();
    for horizontal in [true, false] {
        for off in [-1.5 * LANE_WIDTH, -0.5 * LANE_WIDTH, 0.5 * LANE_WIDTH, 1.5 * LANE_WIDTH] {
            out.push(line(off, horizontal, LaneType::Center));
        }
        for off in [-2.0 * LANE_WIDTH, 2.0 * LANE_WIDTH] {
            out.push(line(off, horizontal, LaneType::Boundary));
        }
    }
    let edge = 2.0 * LANE_WIDTH;
    let c = edge + 2.0;
    for (a, b) in [
        ([-c, -edge], [-c, edge]),
        ([c, -edge], [c, edge]),
        ([-edge, -c], [edge, -c]),
        ([-edge, c], [edge, c]),
    ] {
        out.push(MapPolyline {
            points: (0..=4)
                .map(|i| {
                    let w = i as f64 / 4.0;
                    [a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w]
                })
                .collect(),
            lane_type: LaneType::Crosswalk,
        });
    }
    out
}

/// Generate scenario `index` of a corpus.
pub fn generate_scenario(cfg: &GeneratorConfig, index: usize) -> Result<(Scenario, Archetype)> {
    cfg.validate()?;
    let archetype = cfg.archetypes[index % cfg.archetypes.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let dt = cfg.timestep_s;
    let horizon = dt * cfg.future_steps as f64;

    // Target drives east on the inner eastbound lane, reaching the
    // intersection center at `t_cross` seconds.
    let v_t = rng.gen_range(4.0..7.0);
    let t_cross = rng.gen_range(0.3..0.6) * horizon;
    let y_t = lane_offset(true, 1.0);
    let turns = matches!(archetype, Archetype::Following | Archetype::Static) && rng.gen::<f64>() < 0.3;
    let target_path = if turns {
        // Right turn with a 4 m radius onto the southbound inner lane.
        let radius = 4.0;
        Path2::Turn {
            start: [0.0, y_t],
            heading: 0.0,
            before: -lane_offset(true, -1.0) - radius,
            radius,
            angle: -FRAC_PI_2,
        }
    } else {
        Path2::Straight {
            start: [0.0, y_t],
            heading: 0.0,
        }
    };
    let target = vehicle(target_path, v_t, -v_t * t_cross, &mut rng);

    let partner = match archetype {
        Archetype::Crossing => {
            // Northbound on the inner lane, arriving at the crossing point
            // clearly before or after the target.
            let v_a = rng.gen_range(4.0..7.0);
            let gap = rng.gen_range(1.0..2.0) * if rng.gen() { 1.0 } else { -1.0 };
            let t_a = (t_cross + gap).max(0.5);
            let x_a = -lane_offset(true, 1.0);
            let path = Path2::Straight {
                start: [x_a, y_t],
                heading: FRAC_PI_2,
            };
            vehicle(path, v_a, -v_a * t_a, &mut rng)
        }
        Archetype::Merging => {
            // Starts on the outer eastbound lane and moves into the
            // target's lane ahead of or behind it.
            let lead = rng.gen_range(6.0..15.0) * if rng.gen() { 1.0 } else { -1.0 };
            let v_a = v_t + rng.gen_range(-1.0..1.0);
            let path = Path2::LaneChange {
                start: [0.0, lane_offset(false, 1.0)],
                heading: 0.0,
                offset: LANE_WIDTH,
                from: -v_t * t_cross + lead + v_a * rng.gen_range(0.5..2.0),
                len: 20.0,
            };
            vehicle(path, v_a, -v_t * t_cross + lead, &mut rng)
        }
        Archetype::Parallel => {
            let path = Path2::Straight {
                start: [0.0, lane_offset(false, 1.0)],
                heading: 0.0,
            };
            let offset = rng.gen_range(-6.0..6.0);
            vehicle(path, v_t, -v_t * t_cross + offset, &mut rng)
        }
        Archetype::Following => {
            let gap = rng.gen_range(10.0..18.0) * if rng.gen() { 1.0 } else { -1.0 };
            let path = Path2::Straight {
                start: [0.0, y_t],
                heading: 0.0,
            };
            vehicle(path, v_t, -v_t * t_cross + gap, &mut rng)
        }
        Archetype::Static => {
            // A pedestrian standing on the sidewalk near the target's path.
            let x = -v_t * t_cross + rng.gen_range(5.0..30.0);
            let path = Path2::Straight {
                start: [x, -2.0 * LANE_WIDTH - rng.gen_range(1.0..3.0)],
                heading: FRAC_PI_2,
            };
            Mover {
                path,
                speed: 0.0,
                s0: 0.0,
                length: 0.6,
                width: 0.6,
                kind: AgentType::Pedestrian,
            }
        }
    };

    let n_agents = rng.gen_range(cfg.min_agents..=cfg.max_agents);
    let mut movers = vec![target, partner];
    for i in 0..n_agents.saturating_sub(2) {
        movers.push(filler(cfg, &mut rng, i));
    }
    let agents = movers.iter().map(|m| m.track(cfg, &mut rng)).collect();
    let s = Scenario {
        timestep_s: dt,
        target_index: 0,
        agents,
        polylines: grid_map(cfg.map_extent, cfg.point_spacing),
    };
    s.validate()?;
    Ok((s, archetype))
}

/// A vehicle or cyclist on the far side of the vertical road, moving away
/// from the target's corridor.
fn filler(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, i: usize) -> Mover {
    let north = i % 2 == 0;
    let dir = if north { 1.0 } else { -1.0 };
    let inner = rng.gen();
    let x = -lane_offset(inner, dir);
    let speed = rng.gen_range(3.0..9.0);
    let start_dist = rng.gen_range(25.0..cfg.map_extent - 10.0);
    let path = Path2::Straight {
        start: [x, dir * start_dist],
        heading: dir * FRAC_PI_2,
    };
    let mut m = vehicle(path, speed, 0.0, rng);
    if rng.gen::<f64>() < 0.25 {
        m.kind = AgentType::Cyclist;
        m.length = 1.8;
        m.width = 0.6;
        m.speed = speed.min(5.0);
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub archetype_counts: BTreeMap<String, usize>,
    pub files: Vec<String>,
}

pub fn scenario_file_name(i: usize) -> String {
    format!("scenario_{i:05}.json")
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn generate_scenarios(cfg: &GeneratorConfig) -> Result<Vec<Scenario>> {
    (0..cfg.count).map(|i| generate_scenario(cfg, i).map(|(s, _)| s)).collect()
}

/// Writes scenarios and a manifest into `dir`.
pub fn write_corpus(dir: &Path, cfg: &GeneratorConfig) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut counts = BTreeMap::new();
    let mut files = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let (s, a) = generate_scenario(cfg, i)?;
        *counts.entry(a.name().to_string()).or_insert(0) += 1;
        let name = scenario_file_name(i);
        s.save(&dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        count: cfg.count,
        seed: cfg.seed,
        generator: cfg.clone(),
        archetype_counts: counts,
        files,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a corpus, checking that the manifest matches the directory.
pub fn read_corpus(dir: &Path) -> Result<(Manifest, Vec<Scenario>)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    ensure!(
        manifest.files.len() == manifest.count,
        Input,
        "manifest lists {} files but count is {}",
        manifest.files.len(),
        manifest.count
    );
    let mut on_disk: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("scenario_") && n.ends_with(".json"))
        .collect();
    on_disk.sort();
    let mut listed = manifest.files.clone();
    listed.sort();
    ensure!(on_disk == listed, Input, "manifest does not match scenario files in {}", dir.display());
    let scenarios = manifest
        .files
        .iter()
        .map(|f| Scenario::load(&dir.join(f)))
        .collect::<Result<_>>()?;
    Ok((manifest, scenarios))
}

pub fn corpus_paths(dir: &Path, manifest: &Manifest) -> Vec<PathBuf> {
    manifest.files.iter().map(|f| dir.join(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autolabel::{footprint_headings, footprints_intersect, label_scenario, Intention, LabelConfig, Pose};
    use crate::scene::SceneConfig;

    fn cfg(archetype: Archetype, count: usize) -> GeneratorConfig {
        GeneratorConfig {
            seed: 5,
            count,
            archetypes: vec![archetype],
            ..Default::default()
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let c = GeneratorConfig::default();
        let a = generate_scenarios(&c).unwrap();
        let b = generate_scenarios(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].to_json().unwrap(), b[0].to_json().unwrap());
    }

    #[test]
    fn histories_are_consistent_with_futures() {
        let c = GeneratorConfig {
            position_noise: 0.0,
            heading_noise: 0.0,
            dropout_prob: 0.0,
            ..Default::default()
        };
        for s in generate_scenarios(&c).unwrap() {
            for a in &s.agents {
                let cur = a.current();
                let next = a.future[0];
                let step = ((next[0] - cur.x).powi(2) + (next[1] - cur.y).powi(2)).sqrt();
                let speed = cur.vx.hypot(cur.vy);
                assert!((step - speed * s.timestep_s).abs() < 1e-3, "{step} vs {speed}");
            }
        }
    }

    #[test]
    fn crossing_yields_overtaking_or_yielding() {
        for (s, _) in (0..20).map(|i| generate_scenario(&cfg(Archetype::Crossing, 20), i).unwrap()) {
            let l = label_scenario(&s, &LabelConfig::default(), &SceneConfig::default()).unwrap();
            assert!(matches!(l.intentions[1], Intention::Overtaking | Intention::Yielding), "{:?}", l.intentions);
        }
    }

    #[test]
    fn parallel_yields_nearby_without_overlap() {
        for (s, _) in (0..20).map(|i| generate_scenario(&cfg(Archetype::Parallel, 20), i).unwrap()) {
            let l = label_scenario(&s, &LabelConfig::default(), &SceneConfig::default()).unwrap();
            assert_eq!(l.intentions[1], Intention::Nearby);
            let (t, a) = (&s.agents[0], &s.agents[1]);
            let ht = footprint_headings(&t.future, 0.0);
            let ha = footprint_headings(&a.future, 0.0);
            for i in 0..t.future.len() {
                for j in 0..a.future.len() {
                    assert!(!footprints_intersect(
                        Pose { position: t.future[i], heading: ht[i] },
                        [t.length, t.width],
                        Pose { position: a.future[j], heading: ha[j] },
                        [a.length, a.width],
                        0.5
                    ));
                }
            }
        }
    }

    #[test]
    fn ignored_is_majority() {
        let mut ignored = 0;
        let mut total = 0;
        for s in generate_scenarios(&GeneratorConfig::default()).unwrap() {
            let l = label_scenario(&s, &LabelConfig::default(), &SceneConfig::default()).unwrap();
            ignored += l.intentions.iter().filter(|&&c| c == Intention::Ignored).count();
            total += l.intentions.len();
        }
        assert!(ignored * 2 > total, "{ignored}/{total}");
    }

    #[test]
    fn corpus_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = GeneratorConfig {
            count: 4,
            ..Default::default()
        };
        let m = write_corpus(dir.path(), &c).unwrap();
        let (m2, scenes) = read_corpus(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(scenes, generate_scenarios(&c).unwrap());
        std::fs::remove_file(dir.path().join(&m.files[0])).unwrap();
        assert!(read_corpus(dir.path()).is_err());
    }
}
