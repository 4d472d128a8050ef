//! Trajectory and classification metrics, and the endpoint-NMS ensemble.

use serde::{Deserialize, Serialize};

use crate::autolabel::{Intention, LabelSet};
use crate::error::{ensure, Result};
use crate::model::{Prediction, PredictionDump};
use crate::scene::Point;

pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;
pub const ENSEMBLE_SIZE: usize = 6;

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn ade(pred: &[Point], gt: &[Point]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / gt.len() as f64
}

pub fn min_ade(pred: &[Vec<Point>], gt: &[Point]) -> f64 {
    pred.iter().map(|p| ade(p, gt)).fold(f64::INFINITY, f64::min)
}

pub fn min_fde(pred: &[Vec<Point>], gt: &[Point]) -> f64 {
    let end = *gt.last().expect("non-empty ground truth");
    pred.iter().map(|p| dist(*p.last().expect("non-empty"), end)).fold(f64::INFINITY, f64::min)
}

/// True when every endpoint is farther than `threshold` from the ground truth.
pub fn is_miss(pred: &[Vec<Point>], gt: &[Point], threshold: f64) -> bool {
    min_fde(pred, gt) > threshold
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// One scored mode of one scenario for the ranking metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedMode {
    pub scenario: usize,
    pub confidence: f64,
    pub hit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Corpus-level average precision. Modes are ranked by confidence across
/// all scenarios; the first hit of a scenario is a true positive. The soft
/// variant credits later hits of an already-matched scenario with their
/// confidence instead of counting them as false positives.
pub fn average_precision(modes: &[RankedMode], scenarios: usize, soft: bool) -> (f64, Vec<PrPoint>) {
    if scenarios == 0 {
        return (0.0, Vec::new());
    }
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| modes[b].confidence.total_cmp(&modes[a].confidence).then(a.cmp(&b)));
    let mut matched = vec![false; scenarios];
    let (mut tp, mut credit, mut seen) = (0usize, 0.0f64, 0usize);
    let mut ap = 0.0;
    let mut curve = Vec::new();
    for i in order {
        let m = modes[i];
        seen += 1;
        if m.hit && !matched[m.scenario] {
            matched[m.scenario] = true;
            tp += 1;
            credit += 1.0;
            let precision = credit / seen as f64;
            ap += precision;
            curve.push(PrPoint {
                recall: tp as f64 / scenarios as f64,
                precision,
            });
        } else if m.hit && soft {
            credit += m.confidence.clamp(0.0, 1.0);
        }
    }
    (ap / scenarios as f64, curve)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// `None` when nothing was predicted as this class.
    pub precision: Option<f64>,
    /// `None` when the class is absent from the labels.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

impl ClassMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Self {
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }
}

fn macro_avg(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-agent intention prediction across modes.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentionCase {
    /// Probabilities per mode.
    pub per_mode: Vec<[f64; 4]>,
    pub best_mode: usize,
    pub truth: Intention,
}

fn argmax4(p: &[f64; 4]) -> usize {
    (1..4).fold(0, |b, i| if p[i] > p[b] { i } else { b })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentionMetrics {
    /// Indexed like [`Intention::ALL`].
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    pub top1_accuracy: f64,
    pub top6_accuracy: f64,
    pub agents: usize,
    /// `confusion[truth][predicted]` for the top-1 mode.
    pub confusion: [[usize; 4]; 4],
}

pub fn intention_metrics(cases: &[IntentionCase]) -> IntentionMetrics {
    let mut confusion = [[0usize; 4]; 4];
    let mut any_hits = 0;
    for c in cases {
        let pred = argmax4(&c.per_mode[c.best_mode]);
        confusion[c.truth.index()][pred] += 1;
        if c.per_mode.iter().any(|p| argmax4(p) == c.truth.index()) {
            any_hits += 1;
        }
    }
    let classes: Vec<ClassMetrics> = (0..4)
        .map(|k| {
            let tp = confusion[k][k];
            let fp = (0..4).filter(|&t| t != k).map(|t| confusion[t][k]).sum();
            let fn_ = (0..4).filter(|&p| p != k).map(|p| confusion[k][p]).sum();
            ClassMetrics::from_counts(tp, fp, fn_)
        })
        .collect();
    let correct: usize = (0..4).map(|k| confusion[k][k]).sum();
    let n = cases.len().max(1) as f64;
    IntentionMetrics {
        macro_precision: macro_avg(classes.iter().map(|c| c.precision)),
        macro_recall: macro_avg(classes.iter().map(|c| c.recall)),
        macro_f1: macro_avg(classes.iter().map(|c| c.f1)),
        classes,
        top1_accuracy: correct as f64 / n,
        top6_accuracy: any_hits as f64 / n,
        agents: cases.len(),
        confusion,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMetrics {
    pub occupied: ClassMetrics,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Binary metrics for `(probability, label)` pairs thresholded at 0.5.
pub fn occupancy_metrics(pairs: &[(f64, bool)]) -> OccupancyMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for &(p, l) in pairs {
        match (p >= 0.5, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    OccupancyMetrics {
        occupied: ClassMetrics::from_counts(tp, fp, fn_),
        accuracy: (tp + tn) as f64 / pairs.len().max(1) as f64,
        tp,
        fp,
        fn_,
        tn,
    }
}

/// Everything needed to score one scenario, in one common frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub trajectories: Vec<Vec<Point>>,
    /// Score logits per mode.
    pub scores: Vec<f64>,
    /// `K x N_a` intention probabilities.
    pub intentions: Vec<Vec<[f64; 4]>>,
    /// `K x N_l` occupancy probabilities.
    pub occupancy: Vec<Vec<f64>>,
    pub gt: Vec<Point>,
    pub labels: LabelSet,
    pub target_index: usize,
}

impl EvalCase {
    /// `gt` must be in the same (raw) frame as the dump trajectories.
    pub fn from_dump(dump: &PredictionDump, gt: Vec<Point>, labels: LabelSet, target_index: usize) -> Result<Self> {
        let c = Self {
            trajectories: dump.trajectories.clone(),
            scores: dump.scores.clone(),
            intentions: dump.intentions.clone(),
            occupancy: dump.occupancy.clone(),
            gt,
            labels,
            target_index,
        };
        c.validate()?;
        Ok(c)
    }

    /// From a normalized-frame prediction; `gt` must be normalized too.
    pub fn from_prediction(p: &Prediction, gt: Vec<Point>, labels: LabelSet, target_index: usize) -> Result<Self> {
        let c = Self {
            trajectories: p.all_means(),
            scores: p.final_layer().scores.clone(),
            intentions: (0..p.num_modes).map(|k| (0..p.num_agents).map(|a| p.intention(k, a)).collect()).collect(),
            occupancy: (0..p.num_modes).map(|k| (0..p.num_polylines).map(|j| p.occupancy(k, j)).collect()).collect(),
            gt,
            labels,
            target_index,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.trajectories.len();
        ensure!(k >= 1, Input, "no predicted modes");
        ensure!(self.scores.len() == k, Input, "{} scores for {k} modes", self.scores.len());
        ensure!(!self.gt.is_empty(), Input, "empty ground truth");
        for t in &self.trajectories {
            ensure!(t.len() == self.gt.len(), Input, "predicted horizon {} but ground truth {}", t.len(), self.gt.len());
        }
        ensure!(
            self.intentions.len() == k && self.intentions.iter().all(|r| r.len() == self.labels.intentions.len()),
            Input,
            "intention predictions do not match {} labeled agents",
            self.labels.intentions.len()
        );
        ensure!(
            self.occupancy.len() == k && self.occupancy.iter().all(|r| r.len() == self.labels.occupancy.len()),
            Input,
            "occupancy predictions do not match {} labeled polylines",
            self.labels.occupancy.len()
        );
        Ok(())
    }

    pub fn best_mode(&self) -> usize {
        (0..self.scores.len()).fold(0, |b, k| if self.scores[k] > self.scores[b] { k } else { b })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub miss_threshold: f64,
    /// Leave the target's own (always ignored) intention out of the metrics.
    pub exclude_target: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            miss_threshold: DEFAULT_MISS_THRESHOLD,
            exclude_target: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioErrors {
    pub index: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenarios: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map_simplified: f64,
    pub soft_map_simplified: f64,
    pub intention: IntentionMetrics,
    pub occupancy: OccupancyMetrics,
}

/// Report plus per-scenario errors and PR curves for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDump {
    pub report: MetricReport,
    pub per_scenario: Vec<ScenarioErrors>,
    pub pr_curve: Vec<PrPoint>,
    pub soft_pr_curve: Vec<PrPoint>,
}

pub fn evaluate(cases: &[EvalCase], cfg: &EvalConfig) -> Result<EvalDump> {
    ensure!(!cases.is_empty(), Input, "nothing to evaluate");
    ensure!(cfg.miss_threshold > 0.0, Config, "miss threshold must be positive");
    let mut per_scenario = Vec::with_capacity(cases.len());
    let mut ranked = Vec::new();
    let mut ints = Vec::new();
    let mut occ = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        c.validate()?;
        let fde = min_fde(&c.trajectories, &c.gt);
        per_scenario.push(ScenarioErrors {
            index: i,
            min_ade: min_ade(&c.trajectories, &c.gt),
            min_fde: fde,
            miss: fde > cfg.miss_threshold,
        });
        let end = *c.gt.last().expect("validated");
        for (t, conf) in c.trajectories.iter().zip(softmax(&c.scores)) {
            ranked.push(RankedMode {
                scenario: i,
                confidence: conf,
                hit: dist(*t.last().expect("validated"), end) <= cfg.miss_threshold,
            });
        }
        let best = c.best_mode();
        for (a, &truth) in c.labels.intentions.iter().enumerate() {
            if cfg.exclude_target && a == c.target_index {
                continue;
            }
            ints.push(IntentionCase {
                per_mode: c.intentions.iter().map(|r| r[a]).collect(),
                best_mode: best,
                truth,
            });
        }
        occ.extend(c.occupancy[best].iter().copied().zip(c.labels.occupancy.iter().copied()));
    }
    let n = cases.len() as f64;
    let (map, pr_curve) = average_precision(&ranked, cases.len(), false);
    let (soft_map, soft_pr_curve) = average_precision(&ranked, cases.len(), true);
    let report = MetricReport {
        scenarios: cases.len(),
        min_ade: per_scenario.iter().map(|s| s.min_ade).sum::<f64>() / n,
        min_fde: per_scenario.iter().map(|s| s.min_fde).sum::<f64>() / n,
        miss_rate: per_scenario.iter().filter(|s| s.miss).count() as f64 / n,
        map_simplified: map,
        soft_map_simplified: soft_map,
        intention: intention_metrics(&ints),
        occupancy: occupancy_metrics(&occ),
    };
    Ok(EvalDump {
        report,
        per_scenario,
        pr_curve,
        soft_pr_curve,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

impl MetricReport {
    /// `metric,value` rows; undefined entries are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![
            ("scenarios".to_string(), self.scenarios.to_string()),
            ("min_ade".into(), self.min_ade.to_string()),
            ("min_fde".into(), self.min_fde.to_string()),
            ("miss_rate".into(), self.miss_rate.to_string()),
            ("map_simplified".into(), self.map_simplified.to_string()),
            ("soft_map_simplified".into(), self.soft_map_simplified.to_string()),
            ("intention_top1".into(), self.intention.top1_accuracy.to_string()),
            ("intention_top6".into(), self.intention.top6_accuracy.to_string()),
            ("intention_macro_f1".into(), fmt_opt(self.intention.macro_f1)),
        ];
        for (c, m) in Intention::ALL.iter().zip(&self.intention.classes) {
            rows.push((format!("intention_{}_precision", c.name()), fmt_opt(m.precision)));
            rows.push((format!("intention_{}_recall", c.name()), fmt_opt(m.recall)));
            rows.push((format!("intention_{}_f1", c.name()), fmt_opt(m.f1)));
        }
        rows.push(("occupancy_precision".into(), fmt_opt(self.occupancy.occupied.precision)));
        rows.push(("occupancy_recall".into(), fmt_opt(self.occupancy.occupied.recall)));
        rows.push(("occupancy_f1".into(), fmt_opt(self.occupancy.occupied.f1)));
        rows.push(("occupancy_accuracy".into(), self.occupancy.accuracy.to_string()));
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// NMS distance threshold from the length of the leading trajectory.
pub fn adaptive_threshold(length: f64) -> f64 {
    ((length - 10.0) / (50.0 - 10.0) * 1.5 + 2.5).clamp(2.5, 3.5)
}

pub fn arc_length(path: &[Point]) -> f64 {
    path.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Trajectories and score logits of one ensemble member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberOutput {
    pub trajectories: Vec<Vec<Point>>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub trajectories: Vec<Vec<Point>>,
    /// Renormalized to sum to one, descending.
    pub scores: Vec<f64>,
    /// `(member, mode)` of each output trajectory.
    pub sources: Vec<(usize, usize)>,
    pub threshold: f64,
    /// Number of outputs taken from suppressed candidates.
    pub backfilled: usize,
}

/// Joint softmax over every member's scores, greedy endpoint NMS, backfill
/// from the suppressed candidates, then renormalization.
pub fn ensemble_nms(members: &[MemberOutput]) -> Result<EnsembleOutput> {
    let mut cands: Vec<(&[Point], f64, (usize, usize))> = Vec::new();
    let mut horizon = None;
    for (m, out) in members.iter().enumerate() {
        ensure!(
            out.trajectories.len() == out.scores.len(),
            Input,
            "member {m}: {} trajectories but {} scores",
            out.trajectories.len(),
            out.scores.len()
        );
        for (k, (t, &s)) in out.trajectories.iter().zip(&out.scores).enumerate() {
            ensure!(!t.is_empty(), Input, "member {m} mode {k} is empty");
            ensure!(s.is_finite(), Input, "member {m} mode {k} has a non-finite score");
            match horizon {
                None => horizon = Some(t.len()),
                Some(h) => ensure!(h == t.len(), Input, "member {m} mode {k} has horizon {} but expected {h}", t.len()),
            }
            cands.push((t, s, (m, k)));
        }
    }
    ensure!(
        cands.len() >= ENSEMBLE_SIZE,
        Input,
        "ensemble needs at least {ENSEMBLE_SIZE} trajectories, got {}",
        cands.len()
    );
    let probs = softmax(&cands.iter().map(|c| c.1).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let threshold = adaptive_threshold(arc_length(cands[order[0]].0));
    let end = |i: usize| *cands[i].0.last().expect("non-empty");
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = Vec::new();
    for &i in &order {
        if kept.len() < ENSEMBLE_SIZE && kept.iter().all(|&j| dist(end(i), end(j)) > threshold) {
            kept.push(i);
        } else {
            suppressed.push(i);
        }
    }
    let backfilled = ENSEMBLE_SIZE - kept.len();
    kept.extend(suppressed.into_iter().take(backfilled));
    kept.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let z: f64 = kept.iter().map(|&i| probs[i]).sum();
    Ok(EnsembleOutput {
        trajectories: kept.iter().map(|&i| cands[i].0.to_vec()).collect(),
        scores: kept.iter().map(|&i| probs[i] / z).collect(),
        sources: kept.iter().map(|&i| cands[i].2).collect(),
        threshold,
        backfilled,
    })
}
