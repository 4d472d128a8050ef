//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParameterStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is near zero are judged on absolute error. Multiplied by
    /// `max(1, |f|)`, since rounding in the differences grows with `|f|`.
    pub floor: f64,
}

impl GradCheckConfig {
    fn floor_for(&self, value: f64) -> f64 {
        self.floor * value.abs().max(1.0)
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, floor: 1e-6 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(label, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, i: usize, analytic: f64, numeric: f64, floor: f64) {
        let e = rel_error(analytic, numeric, floor);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((label.to_string(), i, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every
/// entry of every input tensor.
pub fn check_input_gradients<F>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_input_gradients_on(inputs, cfg, Tape::new, f)
}

/// As [`check_input_gradients`], with every evaluation on a tape from
/// `make` (e.g. a seeded training tape, so dropout masks repeat).
pub fn check_input_gradients_on<F, M>(inputs: &[Tensor], cfg: GradCheckConfig, make: M, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    M: Fn() -> Tape,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = make();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = make();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let floor = cfg.floor_for(tape.scalar(out));
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[ti].len()];
        let analytic = grads.leaf(*v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[ti].len() {
            let orig = work[ti].values()[i];
            work[ti].values_mut()[i] = orig + cfg.h;
            let fp = eval(&work)?;
            work[ti].values_mut()[i] = orig - cfg.h;
            let fm = eval(&work)?;
            work[ti].values_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            report.record(&format!("input{ti}"), i, analytic[i], numeric, floor);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of the scalar `f(store)`. With
/// `samples_per_param = Some(n)` at most `n` seeded entries of every
/// parameter tensor are probed; every tensor is always covered.
pub fn check_parameter_gradients<F>(
    store: &mut ParameterStore,
    cfg: GradCheckConfig,
    samples_per_param: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let floor = cfg.floor_for(tape.scalar(out));
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, g) in grads.params() {
        analytic[id.index()] = Some(g.clone());
    }
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.scalar(out))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let picks: Vec<usize> = match samples_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let name = store.name(id).to_string();
        for i in picks {
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
            let orig = store.get(id).values()[i];
            store.get_mut(id).values_mut()[i] = orig + cfg.h;
            let fp = eval(store)?;
            store.get_mut(id).values_mut()[i] = orig - cfg.h;
            let fm = eval(store)?;
            store.get_mut(id).values_mut()[i] = orig;
            report.record(&name, i, a, (fp - fm) / (2.0 * cfg.h), floor);
        }
    }
    Ok(report)
}
