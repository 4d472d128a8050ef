//! Scene encoder: multi-scale LSTM streams, PointNet-style polyline
//! aggregation, the gated fusion cascade and KNN local attention.

use std::rc::Rc;

use crate::error::{ensure, Result};
use crate::nn::{stack_rows, Conv1d, LayerNorm, Linear, Lstm, Mlp};
use crate::scene::Point;
use crate::tensor::{ParameterStore, Tape, Var};

/// Parallel `conv1d(k) -> LSTM` streams whose final hidden states are
/// concatenated and projected to `d`.
#[derive(Clone, Debug)]
pub struct MultiScaleLstm {
    pub convs: Vec<Conv1d>,
    pub lstms: Vec<Lstm>,
    pub proj: Mlp,
}

impl MultiScaleLstm {
    pub fn new(store: &mut ParameterStore, name: &str, features: usize, d: usize, kernels: &[usize]) -> Result<Self> {
        ensure!(!kernels.is_empty(), Config, "{name}: no kernel sizes");
        let mut convs = Vec::new();
        let mut lstms = Vec::new();
        for &k in kernels {
            convs.push(Conv1d::new(store, &format!("{name}.conv{k}"), k, features, d)?);
            lstms.push(Lstm::new(store, &format!("{name}.lstm{k}"), d, d)?);
        }
        let proj = Mlp::new(store, &format!("{name}.proj"), &[kernels.len() * d, d, d])?;
        Ok(Self { convs, lstms, proj })
    }

    /// `series` is `[N * T, F]` (sequence-major); returns `[N, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, series: Var, n: usize, t: usize) -> Result<Var> {
        let mut finals = Vec::with_capacity(self.convs.len());
        for (conv, lstm) in self.convs.iter().zip(&self.lstms) {
            let c = conv.forward(tape, store, series, n, t)?;
            finals.push(lstm.final_hidden(tape, store, c, n, t)?);
        }
        let h = tape.concat(&finals)?;
        self.proj.forward(tape, store, h)
    }
}

/// Shared per-point MLP, masked max-pool over each polyline's points, then
/// a projection.
#[derive(Clone, Debug)]
pub struct PolylineEncoder {
    pub point_mlp: Mlp,
    pub proj: Linear,
}

impl PolylineEncoder {
    pub fn new(store: &mut ParameterStore, name: &str, features: usize, d: usize) -> Result<Self> {
        Ok(Self {
            point_mlp: Mlp::new(store, &format!("{name}.point_mlp"), &[features, d, d])?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d)?,
        })
    }

    /// `points` is `[N_l * N_p, F]`; `valid` masks padding rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        points: Var,
        points_per_polyline: usize,
        valid: &[bool],
    ) -> Result<Var> {
        let h = self.point_mlp.forward(tape, store, points)?;
        let h = tape.relu(h);
        let pooled = tape.max_pool(h, points_per_polyline, Some(valid))?;
        self.proj.forward(tape, store, pooled)
    }
}

/// `CG(x, c) = W_v x ⊙ sigmoid(W_g maxpool(c))`.
#[derive(Clone, Debug)]
pub struct ContextGate {
    pub value: Linear,
    pub gate: Linear,
}

impl ContextGate {
    pub fn new(store: &mut ParameterStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            value: Linear::new(store, &format!("{name}.value"), d, d)?,
            gate: Linear::new(store, &format!("{name}.gate"), d, d)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, context: Var) -> Result<Var> {
        let rows = tape.shape(context)[0];
        let pooled = tape.max_pool(context, rows, None)?;
        let g = self.gate.forward(tape, store, pooled)?;
        let g = tape.sigmoid(g);
        let g = tape.reshape(g, vec![tape.shape(g)[1]])?;
        let v = self.value.forward(tape, store, x)?;
        tape.mul_row(v, g)
    }
}

/// One fusion stage updating both streams from each other's pooled context.
#[derive(Clone, Debug)]
pub struct McgStage {
    pub first: ContextGate,
    pub second: ContextGate,
}

impl McgStage {
    pub fn new(store: &mut ParameterStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            first: ContextGate::new(store, &format!("{name}.first"), d)?,
            second: ContextGate::new(store, &format!("{name}.second"), d)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, y: Var) -> Result<(Var, Var)> {
        let x2 = self.first.forward(tape, store, x, y)?;
        let y2 = self.second.forward(tape, store, y, x)?;
        Ok((x2, y2))
    }
}

/// Stages in pairing order (agents, relative), (map, relative),
/// (agents, map); the fused map tokens are `L3 + R3`.
#[derive(Clone, Debug)]
pub struct McgCascade {
    pub agent_relative: McgStage,
    pub map_relative: McgStage,
    pub agent_map: McgStage,
}

impl McgCascade {
    pub fn new(store: &mut ParameterStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            agent_relative: McgStage::new(store, &format!("{name}.ar"), d)?,
            map_relative: McgStage::new(store, &format!("{name}.lr"), d)?,
            agent_map: McgStage::new(store, &format!("{name}.al"), d)?,
        })
    }

    /// Returns `(A3, L3 + R3)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, a: Var, r: Var, l: Var) -> Result<(Var, Var)> {
        let (a2, r2) = self.agent_relative.forward(tape, store, a, r)?;
        let (l2, r3) = self.map_relative.forward(tape, store, l, r2)?;
        let (a3, l3) = self.agent_map.forward(tape, store, a2, l2)?;
        let fused = tape.add(l3, r3)?;
        Ok((a3, fused))
    }
}

/// Sinusoidal encoding of 2-D positions: `d/2` channels for x then `d/2`
/// for y, each alternating sin/cos with base wavelength 10000.
pub fn sinusoidal_encoding(positions: &[Point], d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; positions.len() * d];
    for (i, p) in positions.iter().enumerate() {
        for (axis, &coord) in p.iter().enumerate() {
            for c in 0..half {
                let pair = (c / 2) as f64;
                let freq = 1.0 / 10000f64.powf(2.0 * pair / half as f64);
                let a = coord * freq;
                out[i * d + axis * half + c] = if c % 2 == 0 { a.sin() } else { a.cos() };
            }
        }
    }
    out
}

/// Distances are compared on this grid (meters) so that ties survive
/// rounding from rigid transforms.
pub const KNN_DISTANCE_RESOLUTION: f64 = 1e-7;

/// Per-token neighbor lists of size `min(k, N)`, nearest first, ties by
/// ascending index. Flattened `[N, span]`.
pub fn knn_neighbors(positions: &[Point], k: usize) -> (Vec<usize>, usize) {
    knn_neighbors_with(positions, k, &[], 0)
}

/// Like [`knn_neighbors`], but equal distances are ordered by the rows of
/// `tie` (`[N, width]`, compared lexicographically) before falling back to
/// the index. Content-based ordering keeps the neighbor sets equivariant
/// under entity permutations.
pub fn knn_neighbors_with(positions: &[Point], k: usize, tie: &[f64], width: usize) -> (Vec<usize>, usize) {
    let n = positions.len();
    let span = k.min(n);
    let row = |j: usize| &tie[j * width..(j + 1) * width];
    let cmp_rows = |a: usize, b: usize| {
        row(a)
            .iter()
            .zip(row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut out = Vec::with_capacity(n * span);
    let mut order: Vec<(i64, usize)> = Vec::with_capacity(n);
    for p in positions {
        order.clear();
        order.extend(positions.iter().enumerate().map(|(j, q)| {
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            ((d / KNN_DISTANCE_RESOLUTION).round() as i64, j)
        }));
        order.sort_unstable_by(|a, b| a.0.cmp(&b.0).then_with(|| cmp_rows(a.1, b.1)).then(a.1.cmp(&b.1)));
        out.extend(order.iter().take(span).map(|&(_, j)| j));
    }
    (out, span)
}

/// Pre-norm transformer layer with local attention.
#[derive(Clone, Debug)]
pub struct LocalAttentionLayer {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl LocalAttentionLayer {
    pub fn new(store: &mut ParameterStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            q: Linear::new(store, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, &format!("{name}.v"), d, d)?,
            out: Linear::new(store, &format!("{name}.out"), d, d)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, 4 * d, d])?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        pe: Var,
        neighbors: &Rc<[usize]>,
        span: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        let xn = self.norm1.forward(tape, store, x)?;
        let with_pe = tape.add(xn, pe)?;
        let q = self.q.forward(tape, store, with_pe)?;
        let k = self.k.forward(tape, store, with_pe)?;
        let v = self.v.forward(tape, store, xn)?;
        let att = tape.attention(q, k, v, neighbors.clone(), span, heads)?;
        let o = self.out.forward(tape, store, att)?;
        let o = tape.dropout(o, dropout);
        let x = tape.add(x, o)?;
        let xn = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, xn)?;
        let f = tape.dropout(f, dropout);
        tape.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub agent_msl: MultiScaleLstm,
    pub relative_msl: MultiScaleLstm,
    pub polylines: PolylineEncoder,
    pub mcg: McgCascade,
    pub layers: Vec<LocalAttentionLayer>,
}

/// Encoder output on the tape.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    /// `[N_a, D]`.
    pub agents: Var,
    /// `[N_l, D]`.
    pub map: Var,
    /// Neighbor lists over agents followed by polylines.
    pub neighbors: Rc<[usize]>,
    pub span: usize,
}

/// Raw encoder inputs in row layout.
pub struct EncoderInputs<'a> {
    pub agents: Var,
    pub num_agents: usize,
    pub history_steps: usize,
    pub polylines: Var,
    pub num_polylines: usize,
    pub points_per_polyline: usize,
    pub point_valid: &'a [bool],
    pub relative: Var,
    pub agent_positions: &'a [Point],
    pub polyline_positions: &'a [Point],
}

impl SceneEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        agent_features: usize,
        point_features: usize,
        relative_features: usize,
        d: usize,
        kernels: &[usize],
        layers: usize,
    ) -> Result<Self> {
        Ok(Self {
            agent_msl: MultiScaleLstm::new(store, "enc.agent_msl", agent_features, d, kernels)?,
            relative_msl: MultiScaleLstm::new(store, "enc.relative_msl", relative_features, d, kernels)?,
            polylines: PolylineEncoder::new(store, "enc.polyline", point_features, d)?,
            mcg: McgCascade::new(store, "enc.mcg", d)?,
            layers: (0..layers)
                .map(|i| LocalAttentionLayer::new(store, &format!("enc.layer{i}"), d))
                .collect::<Result<_>>()?,
        })
    }

    /// Tokens after the MCG cascade, before attention: `(A3, L3 + R3)`.
    pub fn fused_tokens(&self, tape: &mut Tape, store: &ParameterStore, inp: &EncoderInputs<'_>) -> Result<(Var, Var)> {
        let a = self.agent_msl.forward(tape, store, inp.agents, inp.num_agents, inp.history_steps)?;
        let r = self
            .relative_msl
            .forward(tape, store, inp.relative, inp.num_polylines, inp.history_steps)?;
        let l = self
            .polylines
            .forward(tape, store, inp.polylines, inp.points_per_polyline, inp.point_valid)?;
        self.mcg.forward(tape, store, a, r, l)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        inp: &EncoderInputs<'_>,
        d: usize,
        knn_k: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<EncodedVars> {
        let (a3, l3) = self.fused_tokens(tape, store, inp)?;
        let positions: Vec<Point> = inp
            .agent_positions
            .iter()
            .chain(inp.polyline_positions)
            .copied()
            .collect();
        let x = stack_rows(tape, &[a3, l3])?;
        let (neighbors, span) = knn_neighbors_with(&positions, knn_k, tape.value(x), d);
        let neighbors: Rc<[usize]> = neighbors.into();
        let pe = tape.constant(vec![positions.len(), d], sinusoidal_encoding(&positions, d))?;
        let x = self.attend(tape, store, x, pe, &neighbors, span, heads, dropout)?;
        let rows_a: Vec<usize> = (0..inp.num_agents).collect();
        let rows_l: Vec<usize> = (inp.num_agents..inp.num_agents + inp.num_polylines).collect();
        Ok(EncodedVars {
            agents: tape.select_rows(x, &rows_a)?,
            map: tape.select_rows(x, &rows_l)?,
            neighbors,
            span,
        })
    }

    /// The attention stack alone over given tokens and neighbor lists.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        mut x: Var,
        pe: Var,
        neighbors: &Rc<[usize]>,
        span: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, store, x, pe, neighbors, span, heads, dropout)?;
        }
        Ok(x)
    }
}
