//! Parameterized layers built on the tape: linear maps, MLPs, layer norm,
//! same-padded temporal convolution and the LSTM recurrence.

use crate::error::{ensure, Result};
use crate::tensor::{Init, ParamId, ParameterStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(&format!("{name}.weight"), vec![fan_in, fan_out], Init::FanIn(fan_in))?,
            bias: store.add(&format!("{name}.bias"), vec![fan_out], Init::FanIn(fan_in))?,
            fan_in,
            fan_out,
        })
    }

    /// `x[R, fan_in] -> [R, fan_out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn new(store: &mut ParameterStore, name: &str, widths: &[usize]) -> Result<Self> {
        ensure!(widths.len() >= 2, Config, "MLP {name} needs at least two widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = l.forward(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), vec![width], Init::Const(1.0))?,
            bias: store.add(&format!("{name}.bias"), vec![width], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Same-padded 1-D convolution over time.
///
/// Input rows are laid out `[N * T, C_in]` (sequence-major); each of the
/// `N` sequences is convolved independently with zero padding of
/// `(k - 1) / 2` on both sides, so the temporal length is preserved.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(store: &mut ParameterStore, name: &str, kernel: usize, c_in: usize, c_out: usize) -> Result<Self> {
        ensure!(kernel % 2 == 1, Config, "conv1d kernel size must be odd, got {kernel}");
        let fan_in = kernel * c_in;
        Ok(Self {
            kernel,
            c_in,
            c_out,
            weight: store.add(&format!("{name}.weight"), vec![fan_in, c_out], Init::FanIn(fan_in))?,
            bias: store.add(&format!("{name}.bias"), vec![c_out], Init::FanIn(fan_in))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, n: usize, t: usize) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        conv1d_same(tape, x, n, t, self.kernel, w, b)
    }
}

/// Functional form of [`Conv1d`]: `weight` is `[k * C_in, C_out]` with the
/// tap index major, `bias` is `[C_out]`.
pub fn conv1d_same(
    tape: &mut Tape,
    x: Var,
    n: usize,
    t: usize,
    kernel: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    ensure!(kernel % 2 == 1, Config, "conv1d kernel size must be odd, got {kernel}");
    let shape = tape.shape(x).to_vec();
    ensure!(
        shape.len() == 2 && shape[0] == n * t,
        Dimension,
        "conv1d input {:?} is not [{n}*{t}, C]",
        shape
    );
    let c = shape[1];
    let half = (kernel / 2) as isize;
    let mut index = Vec::with_capacity(n * t * kernel * c);
    for s in 0..n {
        for ti in 0..t as isize {
            for tap in -half..=half {
                let src = ti + tap;
                for ch in 0..c {
                    index.push(if src >= 0 && src < t as isize {
                        Some((s * t + src as usize) * c + ch)
                    } else {
                        None
                    });
                }
            }
        }
    }
    let cols = tape.gather(x, index, vec![n * t, kernel * c])?;
    let y = tape.matmul(cols, weight)?;
    tape.add_row(y, bias)
}

/// Row-wise concatenation of `[R_i, C]` blocks into `[sum R_i, C]`.
pub fn stack_rows(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    ensure!(!xs.is_empty(), Dimension, "stack_rows of nothing");
    let ts = xs.iter().map(|&x| tape.transpose(x)).collect::<Result<Vec<_>>>()?;
    let cat = tape.concat(&ts)?;
    tape.transpose(cat)
}

/// Single-layer LSTM with gate order (input, forget, candidate, output) and
/// zero initial state.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl Lstm {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input,
            hidden,
            w_x: store.add(&format!("{name}.w_x"), vec![input, 4 * hidden], Init::FanIn(hidden))?,
            w_h: store.add(&format!("{name}.w_h"), vec![hidden, 4 * hidden], Init::FanIn(hidden))?,
            bias: store.add(&format!("{name}.bias"), vec![4 * hidden], Init::FanIn(hidden))?,
        })
    }

    /// Hidden states for every step, each `[N, H]`, for input `[N * T, F]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, n: usize, t: usize) -> Result<Vec<Var>> {
        ensure!(t >= 1, Dimension, "LSTM needs at least one time step");
        ensure!(
            tape.shape(x) == [n * t, self.input],
            Dimension,
            "LSTM input {:?} is not [{n}*{t}, {}]",
            tape.shape(x),
            self.input
        );
        let h_dim = self.hidden;
        let wx = tape.param(store, self.w_x);
        let wh = tape.param(store, self.w_h);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add_row(xw, b)?;
        let mut states = Vec::with_capacity(t);
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        for step in 0..t {
            let rows: Vec<usize> = (0..n).map(|s| s * t + step).collect();
            let mut gates = tape.select_rows(xw, &rows)?;
            if let Some(h) = h {
                let hw = tape.matmul(h, wh)?;
                gates = tape.add(gates, hw)?;
            }
            let i = tape.slice_cols(gates, 0, h_dim)?;
            let f = tape.slice_cols(gates, h_dim, h_dim)?;
            let g = tape.slice_cols(gates, 2 * h_dim, h_dim)?;
            let o = tape.slice_cols(gates, 3 * h_dim, h_dim)?;
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let g = tape.tanh(g);
            let o = tape.sigmoid(o);
            let ig = tape.mul(i, g)?;
            let c_new = match c {
                Some(c) => {
                    let fc = tape.mul(f, c)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c_new);
            let h_new = tape.mul(o, tc)?;
            states.push(h_new);
            h = Some(h_new);
            c = Some(c_new);
        }
        Ok(states)
    }

    pub fn final_hidden(&self, tape: &mut Tape, store: &ParameterStore, x: Var, n: usize, t: usize) -> Result<Var> {
        Ok(*self.forward(tape, store, x, n, t)?.last().expect("t >= 1"))
    }
}
