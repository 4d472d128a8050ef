use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter in
/// store order.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the store's populated grads; grads are cleared after.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| store.get(id).grad().is_none()) {
            return Err(Error::Usage(format!(
                "parameter {} has no gradient; run backward before stepping",
                store.name(id)
            )));
        }
        if self.first.len() != store.len() {
            self.first = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            let g = t.grad_slot().take().expect("checked above");
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (i, w) in t.values_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tape};

    fn quadratic_grad(store: &mut ParameterStore, center: &[f64]) {
        let id = store.ids().next().unwrap();
        let mut tape = Tape::new();
        let w = tape.param(store, id);
        let c = tape.constant(vec![center.len()], center.to_vec()).unwrap();
        let d = tape.sub(w, c).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        tape.backward_into(loss, store).unwrap();
    }

    #[test]
    fn zero_grads_without_decay_leave_params_unchanged() {
        let mut store = ParameterStore::new(1);
        let id = store.add("w", vec![3], Init::FanIn(1)).unwrap();
        let before = store.get(id).clone();
        *store.get_mut(id).grad_slot() = Some(vec![0.0; 3]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).values(), before.values());
    }

    #[test]
    fn missing_grads_is_usage_error() {
        let mut store = ParameterStore::new(1);
        store.add("w", vec![1], Init::Const(1.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut store = ParameterStore::new(1);
        let id = store.add("w", vec![1], Init::Const(1.0)).unwrap();
        quadratic_grad(&mut store, &[0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        assert!(store.get(id).values()[0].abs() < 1.0);
    }

    #[test]
    fn two_d_quadratic_reaches_closed_form_minimum() {
        // f(w) = |w - c|^2 has its minimum at c.
        let center = [0.7, -1.3];
        let mut store = ParameterStore::new(1);
        let id = store.add("w", vec![2], Init::Const(0.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        for step in 0..200 {
            if step == 150 {
                opt.set_lr(0.005);
            }
            quadratic_grad(&mut store, &center);
            opt.step(&mut store).unwrap();
        }
        for (w, c) in store.get(id).values().iter().zip(center) {
            assert!((w - c).abs() < 1e-3, "{w} vs {c}");
        }
    }
}
