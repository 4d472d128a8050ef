//! Winner-take-all objective, learning-rate schedule and training loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autolabel::{label_scenario, Intention, LabelConfig, LabelSet};
use crate::error::{ensure, Error, Result};
use crate::model::{LayerVars, Model, ModelConfig};
use crate::scene::{normalize_scene, NormalizedScene, Point, Scenario, SceneConfig};
use crate::tensor::{AdamW, AdamWConfig, ParameterStore, Tape, Var};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub intention: f64,
    pub occupancy: f64,
    pub trajectory: f64,
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            intention: 100.0,
            occupancy: 100.0,
            trajectory: 1.0,
            score: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    /// Per intention class (ignored, nearby, overtaking, yielding).
    pub intention_alpha: [f64; 4],
    pub intention_gamma: [f64; 4],
    pub occupancy_alpha: f64,
    pub occupancy_gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            intention_alpha: [0.1, 0.45, 0.45, 0.45],
            intention_gamma: [2.0, 1.0, 1.0, 1.0],
            occupancy_alpha: 0.25,
            occupancy_gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        let alphas = self.intention_alpha.iter().chain(std::iter::once(&self.occupancy_alpha));
        let gammas = self.intention_gamma.iter().chain(std::iter::once(&self.occupancy_gamma));
        for a in alphas {
            ensure!(*a > 0.0 && *a <= 1.0, Config, "focal alpha {a} outside (0, 1]");
        }
        for g in gammas {
            ensure!(*g >= 0.0, Config, "focal gamma {g} is negative");
        }
        Ok(())
    }
}

/// Focal loss of the true class, averaged over agents:
/// `mean_i -alpha_c (1 - p)^gamma_c ln p` with `p` clamped at 1e-7.
pub fn intention_focal_loss(tape: &mut Tape, probs: Var, labels: &[Intention], focal: &FocalParams) -> Result<Var> {
    ensure!(
        tape.shape(probs) == [labels.len(), 4],
        Dimension,
        "intention probs {:?} for {} labels",
        tape.shape(probs),
        labels.len()
    );
    ensure!(!labels.is_empty(), Input, "no intention labels");
    let mut terms = Vec::new();
    for c in Intention::ALL {
        let idx: Vec<Option<usize>> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| Some(i * 4 + c.index()))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let n = idx.len();
        let p = tape.gather(probs, idx, vec![n])?;
        terms.push(focal_term(tape, p, focal.intention_alpha[c.index()], focal.intention_gamma[c.index()])?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / labels.len() as f64))
}

/// `sum -alpha (1 - p)^gamma ln p` over the entries of `p`.
fn focal_term(tape: &mut Tape, p: Var, alpha: f64, gamma: f64) -> Result<Var> {
    let p = tape.clamp(p, PROB_CLAMP, 1.0);
    let lp = tape.ln(p);
    let q = tape.neg(p);
    let q = tape.add_scalar(q, 1.0);
    let w = tape.pow_const(q, gamma);
    let t = tape.mul(w, lp)?;
    let s = tape.sum(t);
    Ok(tape.scale(s, -alpha))
}

/// Binary focal loss summed over polylines with a shared `alpha`.
pub fn occupancy_focal_loss(tape: &mut Tape, probs: Var, labels: &[bool], focal: &FocalParams) -> Result<Var> {
    ensure!(
        tape.shape(probs).iter().product::<usize>() == labels.len(),
        Dimension,
        "occupancy probs {:?} for {} labels",
        tape.shape(probs),
        labels.len()
    );
    let flat = tape.reshape(probs, vec![labels.len()])?;
    let pos: Vec<Option<usize>> = labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| Some(i)).collect();
    let neg: Vec<Option<usize>> = labels.iter().enumerate().filter(|(_, &l)| !l).map(|(i, _)| Some(i)).collect();
    let (a, g) = (focal.occupancy_alpha, focal.occupancy_gamma);
    let mut total = None;
    if !pos.is_empty() {
        let n = pos.len();
        let p = tape.gather(flat, pos, vec![n])?;
        let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
        total = Some(focal_term(tape, p, a, g)?);
    }
    if !neg.is_empty() {
        let n = neg.len();
        let p = tape.gather(flat, neg, vec![n])?;
        let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let q = tape.neg(p);
        let q = tape.add_scalar(q, 1.0);
        let t = focal_term(tape, q, a, g)?;
        total = Some(match total {
            Some(x) => tape.add(x, t)?,
            None => t,
        });
    }
    total.ok_or_else(|| Error::Input("no occupancy labels".into()))
}

/// Bivariate Gaussian negative log-likelihood summed over steps.
/// `params` is `[T, 5]` as `(mu_x, mu_y, sigma_x, sigma_y, rho)`.
pub fn gmm_nll_loss(tape: &mut Tape, params: Var, gt: &[Point]) -> Result<Var> {
    let t = gt.len();
    ensure!(tape.shape(params) == [t, 5], Dimension, "GMM params {:?} for {t} steps", tape.shape(params));
    let g = tape.constant(vec![t, 2], gt.iter().flatten().copied().collect())?;
    let mu = tape.slice_cols(params, 0, 2)?;
    let sigma = tape.slice_cols(params, 2, 2)?;
    let rho = tape.slice_cols(params, 4, 1)?;
    let diff = tape.sub(g, mu)?;
    let d = tape.div(diff, sigma)?;
    let dx = tape.slice_cols(d, 0, 1)?;
    let dy = tape.slice_cols(d, 1, 1)?;
    let xx = tape.mul(dx, dx)?;
    let yy = tape.mul(dy, dy)?;
    let xy = tape.mul(dx, dy)?;
    let rxy = tape.mul(rho, xy)?;
    let rxy = tape.scale(rxy, -2.0);
    let z = tape.add(xx, yy)?;
    let z = tape.add(z, rxy)?;
    let r2 = tape.mul(rho, rho)?;
    let one_minus = tape.neg(r2);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let quad = tape.div(z, one_minus)?;
    let quad = tape.scale(quad, 0.5);
    let log_det = tape.ln(one_minus);
    let log_det = tape.scale(log_det, 0.5);
    let log_sigma = tape.ln(sigma);
    let log_sigma = tape.sum(log_sigma);
    let rest = tape.add(quad, log_det)?;
    let rest = tape.sum(rest);
    let total = tape.add(log_sigma, rest)?;
    let total = tape.add_scalar(total, t as f64 * (2.0 * PI).ln());
    if !tape.scalar(total).is_finite() {
        return Err(Error::Numeric("non-finite GMM likelihood".into()));
    }
    Ok(total)
}

/// Binary cross-entropy of sigmoid(score logits) against the one-hot winner,
/// summed over modes.
pub fn score_bce_loss(tape: &mut Tape, logits: Var, winner: usize) -> Result<Var> {
    let k = tape.shape(logits).iter().product::<usize>();
    ensure!(winner < k, Input, "winner {winner} out of range for {k} modes");
    let flat = tape.reshape(logits, vec![k])?;
    let sp = tape.softplus(flat);
    let sp = tape.sum(sp);
    let w = tape.gather(flat, vec![Some(winner)], vec![1])?;
    tape.sub(sp, w)
}

/// Mode whose mean endpoint is closest to the ground-truth endpoint; ties
/// go to the lowest index. `gmm` is `K * T * 5` values.
pub fn select_winner(gmm: &[f64], modes: usize, gt_end: Point) -> usize {
    let t = gmm.len() / 5 / modes;
    let mut best = (0, f64::INFINITY);
    for k in 0..modes {
        let r = &gmm[(k * t + t - 1) * 5..][..2];
        let d = (r[0] - gt_end[0]).hypot(r[1] - gt_end[1]);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

pub fn lr_schedule(epoch: usize, base: f64, decay_start: usize, half_every: usize) -> f64 {
    if epoch < decay_start {
        return base;
    }
    let halvings = (epoch - decay_start) / half_every.max(1) + 1;
    base * 0.5f64.powi(halvings as i32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub intention: f64,
    pub occupancy: f64,
    pub trajectory: f64,
    pub score: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.intention += o.intention * s;
        self.occupancy += o.occupancy * s;
        self.trajectory += o.trajectory * s;
        self.score += o.score * s;
        self.total += o.total * s;
    }
}

/// `w1 L_int + w2 L_occ + w3 L_traj + w4 L_score`, averaged over layers.
pub fn total_loss(tape: &mut Tape, per_layer: &[[Var; 4]], w: &LossWeights) -> Result<Var> {
    ensure!(!per_layer.is_empty(), Input, "no layers to combine");
    let mut acc: Option<Var> = None;
    for terms in per_layer {
        let weights = [w.intention, w.occupancy, w.trajectory, w.score];
        for (&t, wt) in terms.iter().zip(weights) {
            let s = tape.scale(t, wt);
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
    }
    let acc = acc.expect("non-empty");
    Ok(tape.scale(acc, 1.0 / per_layer.len() as f64))
}

/// A scenario ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: NormalizedScene,
    pub labels: LabelSet,
    /// Target future in the normalized frame.
    pub gt: Vec<Point>,
}

pub fn prepare(s: &Scenario, labels: &LabelConfig, scene: &SceneConfig) -> Result<Sample> {
    let n = normalize_scene(s, scene)?;
    let l = label_scenario(s, labels, scene)?;
    let gt = n
        .target_future
        .clone()
        .ok_or_else(|| Error::Input("target future required for training".into()))?;
    Ok(Sample {
        scene: n,
        labels: l,
        gt,
    })
}

/// Loss of one decoder layer at its own winning mode.
pub fn layer_losses(
    tape: &mut Tape,
    lv: &LayerVars,
    sample: &Sample,
    modes: usize,
    focal: &FocalParams,
) -> Result<([Var; 4], usize)> {
    let t_f = sample.gt.len();
    ensure!(
        tape.shape(lv.gmm)[0] == modes * t_f,
        Dimension,
        "prediction horizon {} does not match ground truth {t_f}",
        tape.shape(lv.gmm)[0] / modes
    );
    let k = select_winner(tape.value(lv.gmm), modes, *sample.gt.last().expect("non-empty"));
    let n_a = sample.scene.num_agents();
    let n_l = sample.scene.num_polylines();
    let int_rows: Vec<usize> = (k * n_a..(k + 1) * n_a).collect();
    let int = tape.select_rows(lv.intentions, &int_rows)?;
    let l_int = intention_focal_loss(tape, int, &sample.labels.intentions, focal)?;
    let occ_rows: Vec<usize> = (k * n_l..(k + 1) * n_l).collect();
    let occ = tape.select_rows(lv.occupancy, &occ_rows)?;
    let l_occ = occupancy_focal_loss(tape, occ, &sample.labels.occupancy, focal)?;
    let gmm_rows: Vec<usize> = (k * t_f..(k + 1) * t_f).collect();
    let gmm = tape.select_rows(lv.gmm, &gmm_rows)?;
    let l_traj = gmm_nll_loss(tape, gmm, &sample.gt)?;
    let l_score = score_bce_loss(tape, lv.scores, k)?;
    Ok(([l_int, l_occ, l_traj, l_score], k))
}

/// Full objective for one sample; returns the scalar and its components.
pub fn sample_loss(
    tape: &mut Tape,
    model: &Model,
    store: &ParameterStore,
    sample: &Sample,
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<(Var, LossBreakdown)> {
    let fv = model.forward(tape, store, &sample.scene, model.config.pruning())?;
    let mut per_layer = Vec::with_capacity(fv.layers.len());
    let mut parts = LossBreakdown::default();
    let inv = 1.0 / fv.layers.len() as f64;
    for lv in &fv.layers {
        let (terms, _) = layer_losses(tape, lv, sample, model.config.num_modes, focal)?;
        parts.intention += tape.scalar(terms[0]) * inv;
        parts.occupancy += tape.scalar(terms[1]) * inv;
        parts.trajectory += tape.scalar(terms[2]) * inv;
        parts.score += tape.scalar(terms[3]) * inv;
        per_layer.push(terms);
    }
    let total = total_loss(tape, &per_layer, weights)?;
    parts.total = tape.scalar(total);
    Ok((total, parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_start: usize,
    pub half_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-4,
            decay_start: 22,
            half_every: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Optimizer steps; training stops early only on error.
    pub steps: usize,
    /// Scenarios per optimizer step.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    /// Gradient clipping by global L2 norm; 0 disables.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub model: ModelConfig,
    pub labels: LabelConfig,
    pub scene: SceneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 1,
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            clip_norm: 0.0,
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            model: ModelConfig::default(),
            labels: LabelConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced settings for the 20-scenario overfit run.
    pub fn toy() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            schedule: LrSchedule {
                base: 2e-3,
                decay_start: 80,
                half_every: 20,
            },
            optimizer: AdamWConfig {
                lr: 2e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            clip_norm: 10.0,
            model: ModelConfig::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.schedule.base >= 0.0, Config, "learning rate must be non-negative");
        ensure!(self.clip_norm >= 0.0, Config, "clip_norm must be non-negative");
        let w = &self.weights;
        ensure!(
            [w.intention, w.occupancy, w.trajectory, w.score].iter().all(|v| *v >= 0.0),
            Config,
            "loss weights must be non-negative"
        );
        self.focal.validate()?;
        self.model.validate()?;
        self.labels.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParameterStore,
    pub curve: Vec<LossRow>,
}

impl TrainOutcome {
    /// `step,L_int,L_occ,L_traj,L_score,total` per optimizer step.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,intention,occupancy,trajectory,score,total\n");
        for r in &self.curve {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step, r.epoch, r.lr, r.loss.intention, r.loss.occupancy, r.loss.trajectory, r.loss.score, r.loss.total
            ));
        }
        out
    }

    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.curve {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss.total;
            out[r.epoch].1 += 1;
        }
        out.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
    }
}

fn clip_gradients(store: &mut ParameterStore, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = store
        .ids()
        .filter_map(|id| store.get(id).grad().map(|g| g.iter().map(|v| v * v).sum::<f64>()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (model, store) = Model::new(cfg.model.clone(), cfg.seed)?;
    train_from(model, store, samples, cfg)
}

/// Trains an existing model in place for `cfg.steps` optimizer steps.
pub fn train_from(model: Model, mut store: ParameterStore, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!samples.is_empty(), Input, "training corpus is empty");
    let mut opt = AdamW::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor == 0 || cursor >= order.len() {
            if !order.is_empty() {
                epoch += 1;
            }
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let lr = lr_schedule(epoch, cfg.schedule.base, cfg.schedule.decay_start, cfg.schedule.half_every);
        opt.set_lr(lr);
        store.zero_grads();
        let batch: Vec<usize> = order[cursor..(cursor + cfg.batch_size).min(order.len())].to_vec();
        cursor += batch.len();
        let mut parts = LossBreakdown::default();
        let inv = 1.0 / batch.len() as f64;
        for (bi, &i) in batch.iter().enumerate() {
            let mut tape = if cfg.model.dropout > 0.0 {
                Tape::training(cfg.seed ^ ((step as u64) << 20) ^ bi as u64)
            } else {
                Tape::new()
            };
            let (loss, p) = sample_loss(&mut tape, &model, &store, &samples[i], &cfg.weights, &cfg.focal)?;
            if !p.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step} (scenario {i}): intention {}, occupancy {}, trajectory {}, score {}",
                    p.intention, p.occupancy, p.trajectory, p.score
                )));
            }
            let scaled = tape.scale(loss, inv);
            tape.backward_into(scaled, &mut store)?;
            parts.add_scaled(&p, inv);
        }
        clip_gradients(&mut store, cfg.clip_norm);
        opt.step(&mut store)?;
        curve.push(LossRow {
            step,
            epoch,
            lr,
            loss: parts,
        });
    }
    Ok(TrainOutcome { model, store, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_input_gradients, GradCheckConfig, Tensor};

    fn eval(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.scalar(v)
    }

    #[test]
    fn gmm_closed_forms() {
        let nll = |gt: Point, rho: f64| {
            eval(|t| {
                let p = t.constant(vec![1, 5], vec![0.0, 0.0, 1.0, 1.0, rho]).unwrap();
                gmm_nll_loss(t, p, &[gt]).unwrap()
            })
        };
        assert!((nll([0.0, 0.0], 0.0) - 1.8378771).abs() < 1e-6);
        assert!((nll([1.0, 0.0], 0.0) - 2.3378771).abs() < 1e-6);
        assert!((nll([0.0, 0.0], 0.5) - 1.6940358).abs() < 1e-6);
    }

    fn int_loss(p: [f64; 4], label: Intention) -> f64 {
        eval(|t| {
            let v = t.constant(vec![1, 4], p.to_vec()).unwrap();
            intention_focal_loss(t, v, &[label], &FocalParams::default()).unwrap()
        })
    }

    #[test]
    fn intention_focal_closed_forms() {
        assert!((int_loss([0.0, 0.05, 0.05, 0.9], Intention::Yielding) - 0.0047415).abs() < 1e-6);
        assert!((int_loss([0.25; 4], Intention::Overtaking) - 0.4678744).abs() < 1e-6);
        assert_eq!(int_loss([0.0, 1.0, 0.0, 0.0], Intention::Nearby), 0.0);
    }

    fn occ_loss(p: f64, label: bool) -> f64 {
        eval(|t| {
            let v = t.constant(vec![1, 1], vec![p]).unwrap();
            occupancy_focal_loss(t, v, &[label], &FocalParams::default()).unwrap()
        })
    }

    #[test]
    fn occupancy_focal_closed_forms() {
        assert!((occ_loss(0.5, true) - 0.0433217).abs() < 1e-6);
        assert!((occ_loss(0.5, false) - 0.0433217).abs() < 1e-6);
        assert!(occ_loss(1.0, true) < 1e-12);
        assert!(occ_loss(0.0, false) < 1e-12);
    }

    #[test]
    fn score_bce_closed_forms() {
        let logit = (0.99f64 / 0.01).ln();
        let one = eval(|t| {
            let v = t.constant(vec![1, 1], vec![logit]).unwrap();
            score_bce_loss(t, v, 0).unwrap()
        });
        assert!((one - 0.0100503).abs() < 1e-6);
        let two = eval(|t| {
            let v = t.constant(vec![2, 1], vec![0.0, 0.0]).unwrap();
            score_bce_loss(t, v, 1).unwrap()
        });
        assert!((two - 1.3862944).abs() < 1e-6);
    }

    #[test]
    fn total_loss_cases() {
        let mut t = Tape::new();
        let one = t.constant(vec![1], vec![1.0]).unwrap();
        let zero = t.constant(vec![1], vec![0.0]).unwrap();
        let w = LossWeights::default();
        let z = total_loss(&mut t, &[[zero; 4]], &w).unwrap();
        assert_eq!(t.scalar(z), 0.0);
        let u = total_loss(&mut t, &[[one; 4]], &w).unwrap();
        assert_eq!(t.scalar(u), 202.0);
        let two = total_loss(&mut t, &[[one; 4], [zero; 4]], &w).unwrap();
        assert_eq!(t.scalar(two), 101.0);
    }

    #[test]
    fn winner_cases() {
        // Endpoint distances 5, 1, 3 with T = 1.
        let gmm = [5.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(select_winner(&gmm, 3, [0.0, 0.0]), 1);
        assert_eq!(select_winner(&gmm[..5], 1, [0.0, 0.0]), 0);
        let scaled: Vec<f64> = gmm.iter().map(|v| v * 7.0).collect();
        assert_eq!(select_winner(&scaled, 3, [0.0, 0.0]), 1);
        let tie = [1.0, 0.0, 1.0, 1.0, 0.0, -1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(select_winner(&tie, 2, [0.0, 0.0]), 0);
    }

    #[test]
    fn schedule_cases() {
        assert_eq!(lr_schedule(10, 1e-4, 22, 2), 1e-4);
        assert_eq!(lr_schedule(22, 1e-4, 22, 2), 5e-5);
        assert_eq!(lr_schedule(23, 1e-4, 22, 2), 5e-5);
        assert_eq!(lr_schedule(26, 1e-4, 22, 2), 1.25e-5);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = GradCheckConfig::default();
        let probs = Tensor::new(vec![3, 4], vec![0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25]).unwrap();
        let r = check_input_gradients(&[probs], cfg, |t, v| {
            intention_focal_loss(t, v[0], &[Intention::Yielding, Intention::Ignored, Intention::Overtaking], &FocalParams::default())
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let occ = Tensor::new(vec![3, 1], vec![0.2, 0.6, 0.9]).unwrap();
        let r = check_input_gradients(&[occ], cfg, |t, v| occupancy_focal_loss(t, v[0], &[true, false, true], &FocalParams::default())).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let gmm = Tensor::new(vec![2, 5], vec![0.3, -0.2, 0.8, 1.3, 0.4, 1.0, 0.5, 1.1, 0.7, -0.6]).unwrap();
        let r = check_input_gradients(&[gmm], cfg, |t, v| gmm_nll_loss(t, v[0], &[[0.1, 0.2], [1.4, 0.1]])).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let s = Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_input_gradients(&[s], cfg, |t, v| score_bce_loss(t, v[0], 2)).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn losses_are_non_negative() {
        for p in [0.01, 0.3, 0.5, 0.99] {
            assert!(occ_loss(p, true) >= 0.0 && occ_loss(p, false) >= 0.0);
            let q = (1.0 - p) / 3.0;
            for c in Intention::ALL {
                let mut v = [q; 4];
                v[c.index()] = p;
                assert!(int_loss(v, c) >= 0.0);
            }
        }
    }
}
