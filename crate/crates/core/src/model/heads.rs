//! Per-mode intention and occupancy heads, utility scores and top-k
//! selection.
//!
//! Both heads evaluate, for every (mode, entity) pair laid out mode-major,
//! `T = MLP_b(MLP_a(token ⊕ query) + T_prev)` followed by an output MLP:
//! four softmax classes for agents, one sigmoid logit for polylines.

use crate::error::Result;
use crate::nn::{Linear, Mlp};
use crate::tensor::{ParameterStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct PairHead {
    /// First layer of `MLP_a`, fan-in `2D` (token rows then query rows).
    pub pair_in: Linear,
    pub pair_out: Linear,
    pub refine: Linear,
    pub classify: Mlp,
}

/// Head output on the tape, rows ordered `k * N + i`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// Intention probabilities `[K*N, 4]` or occupancy probabilities `[K*N, 1]`.
    pub probs: Var,
    /// Recurrent head token `[K*N, D]`.
    pub token: Var,
}

impl PairHead {
    pub fn new(store: &mut ParameterStore, name: &str, d: usize, hidden: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            pair_in: Linear::new(store, &format!("{name}.mlp_a.0"), 2 * d, d)?,
            pair_out: Linear::new(store, &format!("{name}.mlp_a.1"), d, d)?,
            refine: Linear::new(store, &format!("{name}.mlp_b"), d, d)?,
            classify: Mlp::new(store, &format!("{name}.mlp_c"), &[d, hidden, outputs])?,
        })
    }

    /// Logits and head token for tokens `[N, D]`, queries `[K, D]`, and the
    /// previous head token `[K*N, D]` (absent at the first layer).
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        tokens: Var,
        queries: Var,
        prev: Option<Var>,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(tokens)[0];
        let k = tape.shape(queries)[0];
        let d = tape.shape(tokens)[1];
        let w = tape.param(store, self.pair_in.weight);
        let b = tape.param(store, self.pair_in.bias);
        let w_tok = tape.select_rows(w, &(0..d).collect::<Vec<_>>())?;
        let w_qry = tape.select_rows(w, &(d..2 * d).collect::<Vec<_>>())?;
        let tok_part = tape.matmul(tokens, w_tok)?;
        let qry_part = tape.matmul(queries, w_qry)?;
        let tok_rows: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
        let qry_rows: Vec<usize> = (0..k).flat_map(|m| std::iter::repeat(m).take(n)).collect();
        let tok_b = tape.select_rows(tok_part, &tok_rows)?;
        let qry_b = tape.select_rows(qry_part, &qry_rows)?;
        let h = tape.add(tok_b, qry_b)?;
        let h = tape.add_row(h, b)?;
        let h = tape.relu(h);
        let mut h = self.pair_out.forward(tape, store, h)?;
        if let Some(p) = prev {
            h = tape.add(h, p)?;
        }
        let token = self.refine.forward(tape, store, h)?;
        let logits = self.classify.forward(tape, store, token)?;
        Ok((logits, token))
    }

    pub fn intentions(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        agents: Var,
        queries: Var,
        prev: Option<Var>,
    ) -> Result<HeadVars> {
        let (logits, token) = self.logits(tape, store, agents, queries, prev)?;
        Ok(HeadVars {
            probs: tape.softmax(logits),
            token,
        })
    }

    pub fn occupancy(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        map: Var,
        queries: Var,
        prev: Option<Var>,
    ) -> Result<HeadVars> {
        let (logits, token) = self.logits(tape, store, map, queries, prev)?;
        Ok(HeadVars {
            probs: tape.sigmoid(logits),
            token,
        })
    }
}

/// Utility of an intention distribution: weights `[0, 1, 1, 1]`.
pub fn utility_psi(probs: &[f64; 4]) -> f64 {
    1.0 - probs[0]
}

/// Indices of the `count` largest scores, descending, ties by ascending
/// index; `excluded` indices are never returned.
pub fn select_top(scores: &[f64], count: usize, excluded: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != excluded).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_input_gradients, GradCheckConfig, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psi_cases() {
        assert_eq!(utility_psi(&[1.0, 0.0, 0.0, 0.0]), 0.0);
        assert_eq!(utility_psi(&[0.0, 0.2, 0.3, 0.5]), 1.0);
        assert!((utility_psi(&[0.6, 0.4, 0.0, 0.0]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn select_top_cases() {
        assert_eq!(select_top(&[0.3, 0.1, 0.2], 24, None), vec![0, 2, 1]);
        assert_eq!(select_top(&[0.1, 0.9, 0.5], 2, None), vec![1, 2]);
        assert_eq!(select_top(&[0.5; 8], 3, None), vec![0, 1, 2]);
        assert_eq!(select_top(&[0.9, 0.1, 0.5], 2, Some(0)), vec![2, 1]);
    }

    proptest! {
        #[test]
        fn selection_invariant_under_increasing_maps(scores in prop::collection::vec(-5.0f64..5.0, 1..40), count in 1usize..30) {
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            prop_assert_eq!(select_top(&scores, count, None), select_top(&mapped, count, None));
        }
    }

    #[test]
    fn intention_rows_sum_to_one() {
        let mut store = ParameterStore::new(1);
        let head = PairHead::new(&mut store, "h", 8, 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, q) = (random(&mut rng, vec![5, 8]), random(&mut rng, vec![3, 8]));
        let mut tape = Tape::new();
        let (av, qv) = (tape.leaf(&a), tape.leaf(&q));
        let out = head.intentions(&mut tape, &store, av, qv, None).unwrap();
        assert_eq!(tape.shape(out.probs), &[15, 4]);
        for row in tape.value(out.probs).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_is_softmax_of_logits() {
        let mut store = ParameterStore::new(2);
        let head = PairHead::new(&mut store, "h", 4, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, q) = (random(&mut rng, vec![1, 4]), random(&mut rng, vec![1, 4]));
        let mut tape = Tape::new();
        let (av, qv) = (tape.leaf(&a), tape.leaf(&q));
        let (logits, _) = head.logits(&mut tape, &store, av, qv, None).unwrap();
        let l = tape.value(logits).to_vec();
        let out = head.intentions(&mut tape, &store, av, qv, None).unwrap();
        let z: f64 = l.iter().map(|v| v.exp()).sum();
        for (p, v) in tape.value(out.probs).iter().zip(&l) {
            assert!((p - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_weights_give_half_occupancy() {
        let mut store = ParameterStore::new(3);
        let head = PairHead::new(&mut store, "o", 6, 6, 1).unwrap();
        let last = head.classify.last().clone();
        store.get_mut(last.weight).values_mut().fill(0.0);
        store.get_mut(last.bias).values_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, q) = (random(&mut rng, vec![4, 6]), random(&mut rng, vec![2, 6]));
        let mut tape = Tape::new();
        let (lv, qv) = (tape.leaf(&l), tape.leaf(&q));
        let out = head.occupancy(&mut tape, &store, lv, qv, None).unwrap();
        assert_eq!(tape.shape(out.probs), &[8, 1]);
        assert!(tape.value(out.probs).iter().all(|&p| p == 0.5));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut store = ParameterStore::new(4);
        let head = PairHead::new(&mut store, "h", 4, 5, 4).unwrap();
        let occ = PairHead::new(&mut store, "o", 4, 5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(&mut rng, vec![3, 4]), random(&mut rng, vec![2, 4]), random(&mut rng, vec![6, 4])];
        let w = random(&mut rng, vec![6, 4]);
        let r = check_input_gradients(&inputs, GradCheckConfig::default(), |tape, v| {
            let out = head.intentions(tape, &store, v[0], v[1], Some(v[2]))?;
            let occ = occ.occupancy(tape, &store, v[0], v[1], None)?;
            let wv = tape.leaf(&w);
            let weighted = tape.mul(out.probs, wv)?;
            let a = tape.sum(weighted);
            let b = tape.sum(occ.probs);
            tape.add(a, b)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
