use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Tensor};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Uniform(f64),
    Const(f64),
}

/// Named trainable tensors with gradient slots.
///
/// Each parameter draws its initial values from a generator seeded by the
/// store seed and the parameter name, so initialization does not depend on
/// declaration order and is bit-identical across runs.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        ensure!(!self.index.contains_key(name), Config, "duplicate parameter {name}");
        ensure!(shape.iter().all(|&d| d > 0), Dimension, "parameter {name} has empty extent {:?}", shape);
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let values = match init {
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..=b)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let id = ParamId(self.tensors.len());
        self.tensors.push(Tensor::new(shape, values)?.with_requires_grad(true));
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Adds a backward pass's parameter gradients into the grad slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            let t = &mut self.tensors[id.0];
            ensure!(g.len() == t.len(), Dimension, "gradient length mismatch for {}", self.names[id.0]);
            match t.grad_slot() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Multiplies every populated gradient by `s` (used to average batches).
    pub fn scale_grads(&mut self, s: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad_slot() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.seed,
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(ck.seed);
        for p in &ck.params {
            ensure!(!s.index.contains_key(&p.name), Input, "duplicate parameter {} in checkpoint", p.name);
            let id = ParamId(s.tensors.len());
            s.tensors
                .push(Tensor::new(p.shape.clone(), p.values.clone())?.with_requires_grad(true));
            s.names.push(p.name.clone());
            s.index.insert(p.name.clone(), id);
        }
        Ok(s)
    }

    /// Copies values from `other` for every name both stores share, checking shapes.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let Some(j) = other.id(name) else {
                return Err(Error::Input(format!("checkpoint lacks parameter {name}")));
            };
            let src = other.get(j);
            ensure!(
                src.shape() == self.tensors[i].shape(),
                Input,
                "checkpoint shape {:?} for {name}, model expects {:?}",
                src.shape(),
                self.tensors[i].shape()
            );
            self.tensors[i].values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }

    /// Bit-identical comparison of names, shapes and values.
    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Serialized form of a [`ParameterStore`]: name, shape and row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub seed: u64,
    pub params: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
