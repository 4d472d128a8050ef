use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rows_cols, ParamId, ParameterStore, Tensor};
use crate::error::{ensure, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Sigmoid outputs are kept strictly inside (0, 1).
const SIGMOID_GUARD: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleEach(Var, Rc<[f64]>),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    Gather {
        x: Var,
        index: Rc<[Option<usize>]>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        index: Rc<[usize]>,
        span: usize,
        heads: usize,
        weights: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::leaf`]; `None` when unreachable.
    pub fn leaf(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }
}

/// Records primitive ops for one forward pass and replays them in reverse.
///
/// A tape is confined to one thread. Parameters are pulled in with
/// [`Tape::param`]; each parameter appears on a tape at most once so its
/// gradient is accumulated exactly once per backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// An evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    /// Differentiable input (gradient retrievable from [`Gradients::leaf`]).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// Loads a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        ensure!(
            shape.iter().product::<usize>() == self.nodes[x.0].value.len(),
            Dimension,
            "cannot reshape {:?} into {:?}",
            self.nodes[x.0].shape,
            shape
        );
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape, value, Op::Reshape(x)))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.nodes[a.0].shape == self.nodes[b.0].shape,
            Dimension,
            "{what}: shapes {:?} and {:?} differ",
            self.nodes[a.0].shape,
            self.nodes[b.0].shape
        );
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_len(a, b, what)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.rc(x);
        ensure!(
            self.nodes[row.0].value.len() == c,
            Dimension,
            "row broadcast: {} values against {} columns",
            self.nodes[row.0].value.len(),
            c
        );
        let xv = &self.nodes[x.0].value;
        let rv = &self.nodes[row.0].value;
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            let xr = &xv[i * c..(i + 1) * c];
            if mul {
                value.extend(xr.iter().zip(rv).map(|(a, b)| a * b));
            } else {
                value.extend(xr.iter().zip(rv).map(|(a, b)| a + b));
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let op = if mul { Op::MulRow(x, row) } else { Op::AddRow(x, row) };
        Ok(self.push(shape, value, op))
    }

    /// `x[r, c] + row[c]` for every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// `x[r, c] * row[c]` for every row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    /// Elementwise product with a constant array.
    pub fn scale_each(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        ensure!(
            w.len() == self.nodes[x.0].value.len(),
            Dimension,
            "scale_each: {} weights for {} values",
            w.len(),
            self.nodes[x.0].value.len()
        );
        let value = self.nodes[x.0].value.iter().zip(&w).map(|(a, b)| a * b).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, value, Op::ScaleEach(x, w.into())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            Dimension,
            "matmul: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        ensure!(s.len() == 2, Dimension, "transpose needs 2-D, got {:?}", s);
        let (r, c) = (s[0], s[1]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| sigmoid(v).clamp(SIGMOID_GUARD, 1.0 - SIGMOID_GUARD),
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log(x))
    }

    /// `x^p` for a constant exponent; `x` must be non-negative.
    pub fn pow_const(&mut self, x: Var, p: f64) -> Var {
        self.map(x, |v| v.powf(p), Op::PowConst(x, p))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.rc(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Softmax(x))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        ensure!(
            self.nodes[gain.0].value.len() == c && self.nodes[bias.0].value.len() == c,
            Dimension,
            "layer_norm: affine width must be {c}"
        );
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Max over consecutive groups of `group` rows: `[G*group, C] -> [G, C]`.
    ///
    /// Rows with `mask[row] == false` are skipped; a group with no valid row
    /// yields zeros.
    pub fn max_pool(&mut self, x: Var, group: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.rc(x);
        ensure!(group > 0 && r % group == 0, Dimension, "max_pool: {r} rows not divisible by {group}");
        if let Some(m) = mask {
            ensure!(m.len() == r, Dimension, "max_pool: mask has {} entries for {r} rows", m.len());
        }
        let g = r / group;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; g * c];
        let mut argmax = vec![None; g * c];
        for gi in 0..g {
            for row in gi * group..(gi + 1) * group {
                if mask.is_some_and(|m| !m[row]) {
                    continue;
                }
                for j in 0..c {
                    let v = xv[row * c + j];
                    let slot = gi * c + j;
                    if argmax[slot].is_none() || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = Some(row * c + j);
                    }
                }
            }
        }
        Ok(self.push(vec![g, c], out, Op::MaxPool { x, argmax }))
    }

    /// `out[i] = x[index[i]]`, or zero where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: Vec<usize>) -> Result<Var> {
        ensure!(
            shape.iter().product::<usize>() == index.len(),
            Dimension,
            "gather: {} indices for shape {:?}",
            index.len(),
            shape
        );
        let xv = &self.nodes[x.0].value;
        ensure!(
            index.iter().flatten().all(|&i| i < xv.len()),
            Dimension,
            "gather index out of range"
        );
        let out = index.iter().map(|i| i.map_or(0.0, |i| xv[i])).collect();
        Ok(self.push(shape, out, Op::Gather { x, index: index.into() }))
    }

    /// Selects whole rows (last axis kept) in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(x);
        ensure!(rows.iter().all(|&i| i < r), Dimension, "select_rows: row out of range");
        let index = rows
            .iter()
            .flat_map(|&i| (0..c).map(move |j| Some(i * c + j)))
            .collect();
        self.gather(x, index, vec![rows.len(), c])
    }

    /// Contiguous column block `[start, start+len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        ensure!(start + len <= c, Dimension, "slice_cols: {start}+{len} > {c}");
        let index = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| Some(i * c + j)))
            .collect();
        self.gather(x, index, vec![r, len])
    }

    /// Concatenation along the last axis; all inputs need the same row count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), Dimension, "concat of nothing");
        let r = self.rc(xs[0]).0;
        ensure!(
            xs.iter().all(|&x| self.rc(x).0 == r),
            Dimension,
            "concat: row counts differ"
        );
        let total: usize = xs.iter().map(|&x| self.rc(x).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let c = self.rc(x).1;
                out.extend_from_slice(&self.nodes[x.0].value[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::Concat(xs.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![1], vec![s], Op::Mean(x))
    }

    /// Inverted dropout; the identity on evaluation tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let value = self.nodes[x.0].value.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention over index lists.
    ///
    /// `q` is `[Nq, D]`, `k` and `v` are `[Nk, D]`. Query `i` attends to the
    /// `span` key rows `index[i*span .. (i+1)*span]`. With `span == 0` the
    /// output is all zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        index: Rc<[usize]>,
        span: usize,
        heads: usize,
    ) -> Result<Var> {
        let (nq, d) = self.rc(q);
        let (nk, dk) = self.rc(k);
        ensure!(dk == d && self.rc(v) == (nk, d), Dimension, "attention: q/k/v widths differ");
        ensure!(heads > 0 && d % heads == 0, Config, "attention: {d} not divisible by {heads} heads");
        ensure!(index.len() == nq * span, Dimension, "attention: index length {} != {}x{}", index.len(), nq, span);
        ensure!(index.iter().all(|&i| i < nk), Dimension, "attention: key index out of range");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut weights = vec![0.0; nq * heads * span];
        let mut out = vec![0.0; nq * d];
        let mut scores = vec![0.0; span];
        for i in 0..nq {
            let keys = &index[i * span..(i + 1) * span];
            for h in 0..heads {
                let qh = &qv[i * d + h * dh..i * d + (h + 1) * dh];
                for (s, &j) in scores.iter_mut().zip(keys) {
                    let kh = &kv[j * d + h * dh..j * d + (h + 1) * dh];
                    *s = dot(qh, kh) * scale;
                }
                let w = &mut weights[(i * heads + h) * span..(i * heads + h + 1) * span];
                softmax_into(&scores, w);
                let oh = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (&wj, &j) in w.iter().zip(keys) {
                    let vh = &vv[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &x) in oh.iter_mut().zip(vh) {
                        *o += wj * x;
                    }
                }
            }
        }
        Ok(self.push(
            vec![nq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                index,
                span,
                heads,
                weights,
            },
        ))
    }

    /// Softmax weights of an attention node, laid out `[Nq, heads, span]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                weights,
                span,
                heads,
                ..
            } => Some((weights, *heads, *span)),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`. Every node is visited once; the tape
    /// is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let g = match grads[idx].take() {
                Some(g) => g,
                None => match node.op {
                    Op::Param(id) => {
                        out.params.push((id, vec![0.0; node.value.len()]));
                        continue;
                    }
                    _ => continue,
                },
            };
            self.backprop_node(idx, g, &mut grads, &mut out);
        }
        out.params.sort_by_key(|(id, _)| id.0);
        self.clear();
        Ok(out)
    }

    /// [`Tape::backward`] followed by accumulation into the store's grad slots.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        store.accumulate(&g)?;
        Ok(g)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {
                out.leaves.insert(idx, g);
            }
            Op::Param(id) => out.params.push((*id, g)),
            Op::Reshape(x) => axpy(acc(grads, *x, len(*x)), 1.0, &g),
            Op::Add(a, b) => {
                axpy(acc(grads, *a, g.len()), 1.0, &g);
                axpy(acc(grads, *b, g.len()), 1.0, &g);
            }
            Op::Sub(a, b) => {
                axpy(acc(grads, *a, g.len()), 1.0, &g);
                axpy(acc(grads, *b, g.len()), -1.0, &g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                for (d, (gi, bi)) in acc(grads, *a, g.len()).iter_mut().zip(g.iter().zip(bv)) {
                    *d += gi * bi;
                }
                for (d, (gi, ai)) in acc(grads, *b, g.len()).iter_mut().zip(g.iter().zip(av)) {
                    *d += gi * ai;
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                for (d, (gi, bi)) in acc(grads, *a, g.len()).iter_mut().zip(g.iter().zip(bv)) {
                    *d += gi / bi;
                }
                let db = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
            Op::AddRow(x, row) => {
                axpy(acc(grads, *x, g.len()), 1.0, &g);
                let c = len(*row);
                let dr = acc(grads, *row, c);
                for chunk in g.chunks(c) {
                    axpy(dr, 1.0, chunk);
                }
            }
            Op::MulRow(x, row) => {
                let c = len(*row);
                let (xv, rv) = (val(*x), val(*row));
                let dx = acc(grads, *x, g.len());
                for (i, chunk) in g.chunks(c).enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += chunk[j] * rv[j];
                    }
                }
                let dr = acc(grads, *row, c);
                for (i, chunk) in g.chunks(c).enumerate() {
                    for j in 0..c {
                        dr[j] += chunk[j] * xv[i * c + j];
                    }
                }
            }
            Op::Scale(x, s) => axpy(acc(grads, *x, g.len()), *s, &g),
            Op::AddScalar(x) => axpy(acc(grads, *x, g.len()), 1.0, &g),
            Op::ScaleEach(x, w) => {
                for (d, (gi, wi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(w.iter())) {
                    *d += gi * wi;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                let da = acc(grads, *a, m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        da[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                    }
                }
                let db = acc(grads, *b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = av[i * k + p];
                        if s != 0.0 {
                            axpy(&mut db[p * n..(p + 1) * n], s, grow);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = &self.nodes[x.0].shape;
                let (r, c) = (s[0], s[1]);
                let dx = acc(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                for (d, (gi, yi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(y)) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                for (d, (gi, yi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(y)) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                for (d, (gi, xi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(xv)) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                for (d, (gi, xi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(xv)) {
                    *d += gi * sigmoid(*xi);
                }
            }
            Op::Exp(x) => {
                let y = &node.value;
                for (d, (gi, yi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(y)) {
                    *d += gi * yi;
                }
            }
            Op::Log(x) => {
                let xv = val(*x);
                for (d, (gi, xi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(xv)) {
                    *d += gi / xi;
                }
            }
            Op::PowConst(x, p) => {
                let xv = val(*x);
                let p = *p;
                for (d, (gi, xi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(xv)) {
                    if p != 0.0 {
                        *d += gi * p * xi.powf(p - 1.0);
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                for (d, (gi, xi)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(xv)) {
                    if *xi >= *lo && *xi <= *hi {
                        *d += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let c = rows_cols(&node.shape).1;
                let y = &node.value;
                let dx = acc(grads, *x, g.len());
                for (i, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                    let s = dot(gr, yr);
                    for j in 0..c {
                        dx[i * c + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = rows_cols(&node.shape).1;
                let gv = val(*gain);
                {
                    let dg = acc(grads, *gain, c);
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                {
                    let db = acc(grads, *bias, c);
                    for gr in g.chunks(c) {
                        axpy(db, 1.0, gr);
                    }
                }
                let dx = acc(grads, *x, g.len());
                let mut dh = vec![0.0; c];
                for (i, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    for j in 0..c {
                        dh[j] = gr[j] * gv[j];
                    }
                    let m1 = dh.iter().sum::<f64>() / c as f64;
                    let m2 = dot(&dh, hr) / c as f64;
                    for j in 0..c {
                        dx[i * c + j] += rstd[i] * (dh[j] - m1 - hr[j] * m2);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = acc(grads, *x, len(*x));
                for (gi, a) in g.iter().zip(argmax) {
                    if let Some(a) = a {
                        dx[*a] += gi;
                    }
                }
            }
            Op::Gather { x, index } => {
                let dx = acc(grads, *x, len(*x));
                for (gi, i) in g.iter().zip(index.iter()) {
                    if let Some(i) = i {
                        dx[*i] += gi;
                    }
                }
            }
            Op::Concat(xs) => {
                let r = rows_cols(&node.shape).0;
                let total = rows_cols(&node.shape).1;
                let mut offset = 0;
                for &x in xs {
                    let c = self.rc(x).1;
                    let dx = acc(grads, x, r * c);
                    for i in 0..r {
                        axpy(
                            &mut dx[i * c..(i + 1) * c],
                            1.0,
                            &g[i * total + offset..i * total + offset + c],
                        );
                    }
                    offset += c;
                }
            }
            Op::Sum(x) => {
                let n = len(*x);
                for d in acc(grads, *x, n) {
                    *d += g[0];
                }
            }
            Op::Mean(x) => {
                let n = len(*x);
                let s = g[0] / n.max(1) as f64;
                for d in acc(grads, *x, n) {
                    *d += s;
                }
            }
            Op::Dropout { x, mask } => {
                for (d, (gi, m)) in acc(grads, *x, g.len()).iter_mut().zip(g.iter().zip(mask)) {
                    *d += gi * m;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                index,
                span,
                heads,
                weights,
            } => self.backprop_attention(
                g, grads, *q, *k, *v, index, *span, *heads, weights,
            ),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        q: Var,
        k: Var,
        v: Var,
        index: &[usize],
        span: usize,
        heads: usize,
        weights: &[f64],
    ) {
        let (nq, d) = self.rc(q);
        let nk = self.rc(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dw = vec![0.0; span];
        for i in 0..nq {
            let keys = &index[i * span..(i + 1) * span];
            for h in 0..heads {
                let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                let w = &weights[(i * heads + h) * span..(i * heads + h + 1) * span];
                for (s, (&j, &wj)) in keys.iter().zip(w).enumerate() {
                    let vh = &vv[j * d + h * dh..j * d + (h + 1) * dh];
                    dw[s] = dot(go, vh);
                    axpy(&mut dv[j * d + h * dh..j * d + (h + 1) * dh], wj, go);
                }
                let wdw = dot(w, &dw[..span]);
                let qh = &qv[i * d + h * dh..i * d + (h + 1) * dh];
                for (s, (&j, &wj)) in keys.iter().zip(w).enumerate() {
                    let ds = wj * (dw[s] - wdw) * scale;
                    let kh = &kv[j * d + h * dh..j * d + (h + 1) * dh];
                    axpy(&mut dq[i * d + h * dh..i * d + (h + 1) * dh], ds, kh);
                    axpy(&mut dk[j * d + h * dh..j * d + (h + 1) * dh], ds, qh);
                }
            }
        }
        axpy(acc(grads, q, nq * d), 1.0, &dq);
        axpy(acc(grads, k, nk * d), 1.0, &dk);
        axpy(acc(grads, v, nk * d), 1.0, &dv);
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}
