//! Finite-difference suite over every differentiable op, the nn building
//! blocks and the training losses.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autolabel::Intention;
use crate::error::Result;
use crate::nn::{Conv1d, LayerNorm, Linear, Lstm, Mlp};
use crate::tensor::{check_input_gradients, check_input_gradients_on, GradCheckConfig, GradCheckReport, ParameterStore, Tape, Tensor, Var};
use crate::training::{gmm_nll_loss, intention_focal_loss, occupancy_focal_loss, score_bce_loss, total_loss, FocalParams, LossWeights};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn cases(&self) -> usize {
        self.rows.iter().map(|r| r.cases).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(SuiteRow::passed)
    }

    /// Fixed-width text table, one op per line.
    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>5} {:>8} {:>12}  status\n", "op", "cases", "entries", "max_rel_err");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>5} {:>8} {:>12.3e}  {}\n",
                r.name,
                r.cases,
                r.checked,
                r.max_rel_error,
                if r.passed() { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("consistent shape")
}

/// Values bounded away from zero with random sign, for kinks and divisors.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("consistent shape")
}

/// Scalar `sum(w * y)` with fixed pseudo-random weights, so that outputs
/// with constant sums (softmax, layer norm) still get informative gradients.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = tape.constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Case = Box<dyn Fn(&mut ChaCha8Rng, GradCheckConfig, u64) -> Result<GradCheckReport>>;

fn unary(f: fn(&mut Tape, Var) -> Var, lo: f64, hi: f64) -> Case {
    Box::new(move |rng, cfg, seed| {
        let shape = vec![rng.gen_range(1..5), rng.gen_range(1..6)];
        let x = rand_tensor(rng, shape, lo, hi);
        check_input_gradients(&[x], cfg, |t, v| {
            let y = f(t, v[0]);
            project(t, y, seed)
        })
    })
}

fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var>, positive_b: bool) -> Case {
    Box::new(move |rng, cfg, seed| {
        let shape = vec![rng.gen_range(1..5), rng.gen_range(1..6)];
        let a = rand_tensor(rng, shape.clone(), -2.0, 2.0);
        let b = if positive_b {
            rand_tensor(rng, shape, 0.5, 2.0)
        } else {
            rand_tensor(rng, shape, -2.0, 2.0)
        };
        check_input_gradients(&[a, b], cfg, |t, v| {
            let y = f(t, v[0], v[1])?;
            project(t, y, seed)
        })
    })
}

fn cases() -> Vec<(&'static str, Case)> {
    let mut c: Vec<(&'static str, Case)> = vec![
        ("add", binary(|t, a, b| t.add(a, b), false)),
        ("sub", binary(|t, a, b| t.sub(a, b), false)),
        ("mul", binary(|t, a, b| t.mul(a, b), false)),
        ("div", binary(|t, a, b| t.div(a, b), true)),
        ("scale", unary(|t, x| t.scale(x, -1.7), -2.0, 2.0)),
        ("neg", unary(|t, x| t.neg(x), -2.0, 2.0)),
        ("add_scalar", unary(|t, x| t.add_scalar(x, 0.3), -2.0, 2.0)),
        ("sigmoid", unary(|t, x| t.sigmoid(x), -4.0, 4.0)),
        ("tanh", unary(|t, x| t.tanh(x), -3.0, 3.0)),
        ("softplus", unary(|t, x| t.softplus(x), -4.0, 4.0)),
        ("exp", unary(|t, x| t.exp(x), -2.0, 2.0)),
        ("ln", unary(|t, x| t.ln(x), 0.2, 3.0)),
        ("pow_const", unary(|t, x| t.pow_const(x, 2.5), 0.2, 2.0)),
        ("softmax", unary(|t, x| t.softmax(x), -3.0, 3.0)),
        ("sum", unary(|t, x| t.sum(x), -2.0, 2.0)),
        ("mean", unary(|t, x| t.mean(x), -2.0, 2.0)),
    ];
    c.push((
        "relu",
        Box::new(|rng, cfg, seed| {
            let x = away_from_zero(rng, vec![3, 4]);
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.relu(v[0]);
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "clamp",
        Box::new(|rng, cfg, seed| {
            // Values either well inside or well outside [-0.5, 0.5].
            let x = away_from_zero(rng, vec![3, 4]);
            let x = Tensor::new(x.shape().to_vec(), x.values().iter().map(|v| if v.abs() < 0.6 { v * 0.5 } else { *v }).collect())?;
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.clamp(v[0], -0.5, 0.5);
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "transpose",
        Box::new(|rng, cfg, seed| {
            let shape = vec![rng.gen_range(1..5), rng.gen_range(1..5)];
            let x = rand_tensor(rng, shape, -2.0, 2.0);
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.transpose(v[0])?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "reshape",
        Box::new(|rng, cfg, seed| {
            let x = rand_tensor(rng, vec![2, 6], -2.0, 2.0);
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.reshape(v[0], vec![3, 4])?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "scale_each",
        Box::new(|rng, cfg, seed| {
            let x = rand_tensor(rng, vec![3, 2], -2.0, 2.0);
            let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.scale_each(v[0], w.clone())?;
                project(t, y, seed)
            })
        }),
    ));
    for (name, mul) in [("add_row", false), ("mul_row", true)] {
        c.push((
            name,
            Box::new(move |rng, cfg, seed| {
                let cols = rng.gen_range(1..5);
                let rows = rng.gen_range(1..4);
                let x = rand_tensor(rng, vec![rows, cols], -2.0, 2.0);
                let r = rand_tensor(rng, vec![cols], -2.0, 2.0);
                check_input_gradients(&[x, r], cfg, |t, v| {
                    let y = if mul { t.mul_row(v[0], v[1])? } else { t.add_row(v[0], v[1])? };
                    project(t, y, seed)
                })
            }),
        ));
    }
    c.push((
        "matmul",
        Box::new(|rng, cfg, seed| {
            let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..8), rng.gen_range(1..4));
            let a = rand_tensor(rng, vec![m, k], -1.0, 1.0);
            let b = rand_tensor(rng, vec![k, n], -1.0, 1.0);
            check_input_gradients(&[a, b], cfg, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "layer_norm",
        Box::new(|rng, cfg, seed| {
            let d = rng.gen_range(2..7);
            let x = rand_tensor(rng, vec![3, d], -2.0, 2.0);
            let g = rand_tensor(rng, vec![d], 0.5, 1.5);
            let b = rand_tensor(rng, vec![d], -0.5, 0.5);
            check_input_gradients(&[x, g, b], cfg, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "max_pool",
        Box::new(|rng, cfg, seed| {
            let (groups, size, d) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..4));
            let x = rand_tensor(rng, vec![groups * size, d], -2.0, 2.0);
            let mask: Vec<bool> = (0..groups * size).map(|i| i % size == 0 || rng.gen_bool(0.7)).collect();
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.max_pool(v[0], size, Some(&mask))?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "gather",
        Box::new(|rng, cfg, seed| {
            let x = rand_tensor(rng, vec![4, 3], -2.0, 2.0);
            let idx: Vec<Option<usize>> = (0..10).map(|_| if rng.gen_bool(0.8) { Some(rng.gen_range(0..12)) } else { None }).collect();
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.gather(v[0], idx.clone(), vec![5, 2])?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "select_rows",
        Box::new(|rng, cfg, seed| {
            let x = rand_tensor(rng, vec![5, 3], -2.0, 2.0);
            let rows: Vec<usize> = (0..7).map(|_| rng.gen_range(0..5)).collect();
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.select_rows(v[0], &rows)?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "slice_cols",
        Box::new(|rng, cfg, seed| {
            let x = rand_tensor(rng, vec![3, 6], -2.0, 2.0);
            let start = rng.gen_range(0..4);
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.slice_cols(v[0], start, 2)?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "concat",
        Box::new(|rng, cfg, seed| {
            let a = rand_tensor(rng, vec![3, 2], -2.0, 2.0);
            let b = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            check_input_gradients(&[a, b], cfg, |t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "dropout",
        Box::new(|rng, cfg, seed| {
            let x = rand_tensor(rng, vec![4, 5], -2.0, 2.0);
            check_input_gradients_on(&[x], cfg, || Tape::training(seed), |t, v| {
                let y = t.dropout(v[0], 0.3);
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "attention",
        Box::new(|rng, cfg, seed| {
            let (nq, nk, heads) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..3));
            let d = heads * 2;
            let span = rng.gen_range(1..=nk);
            let q = rand_tensor(rng, vec![nq, d], -1.0, 1.0);
            let k = rand_tensor(rng, vec![nk, d], -1.0, 1.0);
            let v = rand_tensor(rng, vec![nk, d], -1.0, 1.0);
            let index: Rc<[usize]> = (0..nq * span).map(|_| rng.gen_range(0..nk)).collect();
            check_input_gradients(&[q, k, v], cfg, |t, x| {
                let y = t.attention(x[0], x[1], x[2], index.clone(), span, heads)?;
                project(t, y, seed)
            })
        }),
    ));
    c.push(("linear", Box::new(|rng, cfg, seed| layer_case(rng, cfg, seed, 0))));
    c.push(("mlp", Box::new(|rng, cfg, seed| layer_case(rng, cfg, seed, 1))));
    c.push(("layer_norm_module", Box::new(|rng, cfg, seed| layer_case(rng, cfg, seed, 2))));
    c.push((
        "conv1d",
        Box::new(|rng, cfg, seed| {
            let mut store = ParameterStore::new(seed);
            let (n, t_len, k) = (2, rng.gen_range(2..6), [1, 3, 5][rng.gen_range(0..3)]);
            let conv = Conv1d::new(&mut store, "c", k, 3, 2)?;
            let x = rand_tensor(rng, vec![n * t_len, 3], -1.0, 1.0);
            let inputs = check_input_gradients(&[x], cfg, |t, v| {
                let y = conv.forward(t, &store, v[0], n, t_len)?;
                project(t, y, seed)
            })?;
            Ok(inputs)
        }),
    ));
    c.push((
        "lstm",
        Box::new(|rng, cfg, seed| {
            let mut store = ParameterStore::new(seed);
            let (n, t_len) = (2, rng.gen_range(2..5));
            let lstm = Lstm::new(&mut store, "l", 3, 4)?;
            let x = rand_tensor(rng, vec![n * t_len, 3], -1.0, 1.0);
            check_input_gradients(&[x], cfg, |t, v| {
                let y = lstm.final_hidden(t, &store, v[0], n, t_len)?;
                project(t, y, seed)
            })
        }),
    ));
    c.push((
        "loss_intention_focal",
        Box::new(|rng, cfg, _| {
            let n = rng.gen_range(1..6);
            let logits = rand_tensor(rng, vec![n, 4], -2.0, 2.0);
            let labels: Vec<Intention> = (0..n).map(|_| Intention::ALL[rng.gen_range(0..4)]).collect();
            check_input_gradients(&[logits], cfg, |t, v| {
                let p = t.softmax(v[0]);
                intention_focal_loss(t, p, &labels, &FocalParams::default())
            })
        }),
    ));
    c.push((
        "loss_occupancy_focal",
        Box::new(|rng, cfg, _| {
            let n = rng.gen_range(1..8);
            let logits = rand_tensor(rng, vec![n, 1], -3.0, 3.0);
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            check_input_gradients(&[logits], cfg, |t, v| {
                let p = t.sigmoid(v[0]);
                occupancy_focal_loss(t, p, &labels, &FocalParams::default())
            })
        }),
    ));
    c.push((
        "loss_gmm_nll",
        Box::new(|rng, cfg, _| {
            let steps = rng.gen_range(1..5);
            let mut v = Vec::new();
            for _ in 0..steps {
                v.extend([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(-0.8..0.8)]);
            }
            let params = Tensor::new(vec![steps, 5], v)?;
            let gt: Vec<[f64; 2]> = (0..steps).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
            check_input_gradients(&[params], cfg, |t, x| gmm_nll_loss(t, x[0], &gt))
        }),
    ));
    c.push((
        "loss_score_bce",
        Box::new(|rng, cfg, _| {
            let k = rng.gen_range(1..7);
            let s = rand_tensor(rng, vec![k, 1], -3.0, 3.0);
            let w = rng.gen_range(0..k);
            check_input_gradients(&[s], cfg, |t, x| score_bce_loss(t, x[0], w))
        }),
    ));
    c.push((
        "loss_total",
        Box::new(|rng, cfg, _| {
            let layers = rng.gen_range(1..4);
            let terms = rand_tensor(rng, vec![layers * 4], 0.0, 3.0);
            check_input_gradients(&[terms], cfg, |t, x| {
                let per: Vec<[Var; 4]> = (0..layers)
                    .map(|l| {
                        let g = |i: usize, t: &mut Tape| t.gather(x[0], vec![Some(l * 4 + i)], vec![1]);
                        Ok([g(0, t)?, g(1, t)?, g(2, t)?, g(3, t)?])
                    })
                    .collect::<Result<_>>()?;
                total_loss(t, &per, &LossWeights::default())
            })
        }),
    ));
    c
}

fn layer_case(rng: &mut ChaCha8Rng, cfg: GradCheckConfig, seed: u64, kind: usize) -> Result<GradCheckReport> {
    let mut store = ParameterStore::new(seed);
    let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
    match kind {
        0 => {
            let l = Linear::new(&mut store, "l", 4, 3)?;
            check_input_gradients(&[x], cfg, |t, v| {
                let y = l.forward(t, &store, v[0])?;
                project(t, y, seed)
            })
        }
        1 => {
            let m = Mlp::new(&mut store, "m", &[4, 5, 2])?;
            check_input_gradients(&[x], cfg, |t, v| {
                let y = t.scale(v[0], 1.0);
                let y = m.forward(t, &store, y)?;
                project(t, y, seed)
            })
        }
        _ => {
            let n = LayerNorm::new(&mut store, "n", 4)?;
            check_input_gradients(&[x], cfg, |t, v| {
                let y = n.forward(t, &store, v[0])?;
                project(t, y, seed)
            })
        }
    }
}

/// Runs `per_op` seeded cases of every entry.
pub fn run_suite(seed: u64, per_op: usize) -> Result<SuiteReport> {
    let cfg = GradCheckConfig::default();
    let mut rows = Vec::new();
    for (i, (name, case)) in cases().into_iter().enumerate() {
        let mut merged = GradCheckReport::default();
        for c in 0..per_op {
            let case_seed = seed.wrapping_mul(1_000_003).wrapping_add((i * 1000 + c) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            merged.merge(case(&mut rng, cfg, case_seed)?);
        }
        rows.push(SuiteRow {
            name: name.to_string(),
            cases: per_op,
            checked: merged.checked,
            max_rel_error: merged.max_rel_error,
        });
    }
    Ok(SuiteReport { seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_a_few_seeds() {
        for seed in [0, 7] {
            let r = run_suite(seed, 2).unwrap();
            assert!(r.passed(), "{}", r.table());
        }
    }
}
