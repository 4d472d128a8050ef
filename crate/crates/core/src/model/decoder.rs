//! Mode-query decoder: per-layer heads and selection, mode self-attention,
//! pruned cross-attention to agents and map, GMM regression and scores.

use std::rc::Rc;

use crate::error::Result;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::tensor::{Init, ParamId, ParameterStore, Tape, Var};

use super::heads::{select_top, utility_psi, HeadVars, PairHead};

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const RHO_SCALE: f64 = 0.99;

/// Pre-norm attention sublayer with its own projections.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionBlock {
    pub fn new(store: &mut ParameterStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            q: Linear::new(store, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, &format!("{name}.v"), d, d)?,
            out: Linear::new(store, &format!("{name}.out"), d, d)?,
        })
    }

    /// `x + out(attn(q(LN x), k(mem), v(mem)))`; `memory = None` attends to `LN x`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        memory: Option<Var>,
        index: Rc<[usize]>,
        span: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let xn = self.norm.forward(tape, store, x)?;
        let mem = memory.unwrap_or(xn);
        let q = self.q.forward(tape, store, xn)?;
        let k = self.k.forward(tape, store, mem)?;
        let v = self.v.forward(tape, store, mem)?;
        let a = tape.attention(q, k, v, index, span, heads)?;
        let o = self.out.forward(tape, store, a)?;
        let o = tape.dropout(o, dropout);
        tape.add(x, o)
    }
}

/// Per-mode agent and polyline indices attended by one decoder layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub agents: Vec<Vec<usize>>,
    pub polylines: Vec<Vec<usize>>,
}

impl Selection {
    /// Cross-attention tokens touched by each mode.
    pub fn tokens_per_mode(&self) -> Vec<usize> {
        self.agents
            .iter()
            .zip(&self.polylines)
            .map(|(a, l)| a.len() + l.len())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pruning {
    /// Top-m agents by utility and top-n polylines by occupancy.
    TopK { agents: usize, polylines: usize },
    /// Every non-target agent and every polyline.
    Disabled,
}

/// Chooses per-mode selections from head probabilities (`[K*N_a, 4]` and
/// `[K*N_l, 1]`, mode-major). The target never competes.
pub fn select_context(
    intentions: &[f64],
    occupancy: &[f64],
    modes: usize,
    target: usize,
    pruning: Pruning,
) -> Selection {
    let n_a = intentions.len() / 4 / modes;
    let n_l = occupancy.len() / modes;
    let mut sel = Selection {
        agents: Vec::with_capacity(modes),
        polylines: Vec::with_capacity(modes),
    };
    for k in 0..modes {
        match pruning {
            Pruning::TopK { agents, polylines } => {
                let psi: Vec<f64> = intentions[k * n_a * 4..(k + 1) * n_a * 4]
                    .chunks(4)
                    .map(|p| utility_psi(&[p[0], p[1], p[2], p[3]]))
                    .collect();
                sel.agents.push(select_top(&psi, agents, Some(target)));
                sel.polylines
                    .push(select_top(&occupancy[k * n_l..(k + 1) * n_l], polylines, None));
            }
            Pruning::Disabled => {
                sel.agents.push((0..n_a).filter(|&a| a != target).collect());
                sel.polylines.push((0..n_l).collect());
            }
        }
    }
    sel
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub intention: PairHead,
    pub occupancy: PairHead,
    pub self_attn: AttentionBlock,
    pub agent_attn: AttentionBlock,
    pub map_attn: AttentionBlock,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
    pub regression: Mlp,
    pub score: Mlp,
}

/// One decoder layer's outputs on the tape.
#[derive(Clone, Debug)]
pub struct LayerVars {
    /// `[K*N_a, 4]`.
    pub intentions: Var,
    /// `[K*N_a, D]`.
    pub intention_token: Var,
    /// `[K*N_l, 1]`.
    pub occupancy: Var,
    /// `[K*N_l, D]`.
    pub occupancy_token: Var,
    /// `[K*T_f, 5]` as `(mu_x, mu_y, sigma_x, sigma_y, rho)`.
    pub gmm: Var,
    /// `[K, 1]` logits.
    pub scores: Var,
    /// Updated queries `[K, D]`.
    pub queries: Var,
    pub selection: Selection,
}

/// Shape and behavior settings shared by all layers.
#[derive(Clone, Copy, Debug)]
pub struct DecoderSettings {
    pub heads: usize,
    pub future_steps: usize,
    pub output_scale: f64,
    pub dropout: f64,
    pub pruning: Pruning,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        d: usize,
        hidden: usize,
        head_hidden: usize,
        future_steps: usize,
    ) -> Result<Self> {
        Ok(Self {
            intention: PairHead::new(store, &format!("{name}.intention"), d, head_hidden, 4)?,
            occupancy: PairHead::new(store, &format!("{name}.occupancy"), d, head_hidden, 1)?,
            self_attn: AttentionBlock::new(store, &format!("{name}.self_attn"), d)?,
            agent_attn: AttentionBlock::new(store, &format!("{name}.agent_attn"), d)?,
            map_attn: AttentionBlock::new(store, &format!("{name}.map_attn"), d)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, hidden, d])?,
            regression: Mlp::new(store, &format!("{name}.regression"), &[2 * d, hidden, hidden, future_steps * 5])?,
            score: Mlp::new(store, &format!("{name}.score"), &[2 * d, hidden, 1])?,
        })
    }

    /// Heads on the incoming queries, then attention and prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        queries: Var,
        agents: Var,
        map: Var,
        target: usize,
        prev: Option<(Var, Var)>,
        s: &DecoderSettings,
    ) -> Result<LayerVars> {
        let k = tape.shape(queries)[0];
        let HeadVars {
            probs: int_probs,
            token: int_token,
        } = self
            .intention
            .intentions(tape, store, agents, queries, prev.map(|p| p.0))?;
        let HeadVars {
            probs: occ_probs,
            token: occ_token,
        } = self
            .occupancy
            .occupancy(tape, store, map, queries, prev.map(|p| p.1))?;
        let selection = select_context(tape.value(int_probs), tape.value(occ_probs), k, target, s.pruning);

        let all_modes: Rc<[usize]> = (0..k).flat_map(|_| 0..k).collect::<Vec<_>>().into();
        let mut q = self
            .self_attn
            .forward(tape, store, queries, None, all_modes, k, s.heads, s.dropout)?;
        let span_a = selection.agents[0].len();
        let idx_a: Rc<[usize]> = selection.agents.concat().into();
        q = self
            .agent_attn
            .forward(tape, store, q, Some(agents), idx_a, span_a, s.heads, s.dropout)?;
        let span_l = selection.polylines[0].len();
        let idx_l: Rc<[usize]> = selection.polylines.concat().into();
        q = self
            .map_attn
            .forward(tape, store, q, Some(map), idx_l, span_l, s.heads, s.dropout)?;
        let qn = self.ffn_norm.forward(tape, store, q)?;
        let f = self.ffn.forward(tape, store, qn)?;
        let f = tape.dropout(f, s.dropout);
        q = tape.add(q, f)?;

        let target_rows = vec![target; k];
        let tgt = tape.select_rows(agents, &target_rows)?;
        let feat = tape.concat(&[q, tgt])?;
        let raw = self.regression.forward(tape, store, feat)?;
        let raw = tape.reshape(raw, vec![k * s.future_steps, 5])?;
        let gmm = gmm_params(tape, raw, s.output_scale)?;
        let scores = self.score.forward(tape, store, feat)?;
        Ok(LayerVars {
            intentions: int_probs,
            intention_token: int_token,
            occupancy: occ_probs,
            occupancy_token: occ_token,
            gmm,
            scores,
            queries: q,
            selection,
        })
    }
}

/// Maps raw `[R, 5]` outputs to valid Gaussian parameters:
/// `mu = scale * raw`, `sigma = softplus(raw) + 1e-3`, `rho = 0.99 tanh(raw)`.
pub fn gmm_params(tape: &mut Tape, raw: Var, output_scale: f64) -> Result<Var> {
    let mu = tape.slice_cols(raw, 0, 2)?;
    let mu = tape.scale(mu, output_scale);
    let sigma = tape.slice_cols(raw, 2, 2)?;
    let sigma = tape.softplus(sigma);
    let sigma = tape.add_scalar(sigma, SIGMA_FLOOR);
    let rho = tape.slice_cols(raw, 4, 1)?;
    let rho = tape.tanh(rho);
    let rho = tape.scale(rho, RHO_SCALE);
    tape.concat(&[mu, sigma, rho])
}

#[derive(Clone, Debug)]
pub struct TrajectoryDecoder {
    /// Learnable initial mode queries `[K, D]`.
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
}

impl TrajectoryDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        d: usize,
        modes: usize,
        layers: usize,
        hidden: usize,
        head_hidden: usize,
        future_steps: usize,
    ) -> Result<Self> {
        Ok(Self {
            queries: store.add("dec.queries", vec![modes, d], Init::Uniform(1.0))?,
            layers: (0..layers)
                .map(|i| DecoderLayer::new(store, &format!("dec.layer{i}"), d, hidden, head_hidden, future_steps))
                .collect::<Result<_>>()?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        agents: Var,
        map: Var,
        target: usize,
        s: &DecoderSettings,
    ) -> Result<Vec<LayerVars>> {
        let q0 = tape.param(store, self.queries);
        self.forward_from(tape, store, q0, agents, map, target, s)
    }

    /// Same as [`forward`](Self::forward) from explicit initial queries.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        q0: Var,
        agents: Var,
        map: Var,
        target: usize,
        s: &DecoderSettings,
    ) -> Result<Vec<LayerVars>> {
        let mut q = q0;
        let mut prev = None;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let lv = layer.forward(tape, store, q, agents, map, target, prev, s)?;
            q = lv.queries;
            prev = Some((lv.intention_token, lv.occupancy_token));
            out.push(lv);
        }
        Ok(out)
    }
}
