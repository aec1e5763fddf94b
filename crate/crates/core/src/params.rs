//! Named parameter storage, binding onto a tape, and dense-layer helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Parameters keyed by slash-separated paths (`module/layer/slot`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Argument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.params.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Argument(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Subset of parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every parameter on the tape as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (no gradient).
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    /// Copies gradients accumulated on the tape into each parameter's buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (name, var) in &bound.vars {
            if let Some(g) = tape.grad(*var) {
                self.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Order-stable digest of every parameter value.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, t) in &self.params {
            h.update(k.as_bytes());
            for v in t.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut store: ParamStore = serde_json::from_str(&text)?;
        for t in store.params.values_mut() {
            t.set_requires_grad(true);
        }
        Ok(store)
    }
}

/// Parameter handles on a particular tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("parameter `{name}` is not bound")))
    }

    /// Replaces the handles of every parameter under `prefix` with constants.
    pub fn detached(&self, tape: &mut Tape, prefix: &str) -> Bound {
        let vars = self
            .vars
            .iter()
            .map(|(k, &v)| {
                let v = if k.starts_with(prefix) {
                    tape.detach(v)
                } else {
                    v
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Glorot-uniform weight (`fan_in × fan_out`) plus zero bias under `prefix`.
pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    store.insert(format!("{prefix}/weight"), glorot(rng, fan_in, fan_out))?;
    if bias {
        store.insert(format!("{prefix}/bias"), Tensor::zeros(vec![1, fan_out]))?;
    }
    Ok(())
}

pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, values).expect("sizes agree")
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// `x · W + b`
pub fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}/weight"))?;
    let h = tape.matmul(x, w)?;
    match bound.var(&format!("{prefix}/bias")) {
        Ok(b) => tape.add_row(h, b),
        Err(_) => Ok(h),
    }
}

/// Multilayer perceptron over layers `{prefix}/0 .. {prefix}/{n-1}` with
/// LeakyReLU between layers and a linear final layer.
pub fn mlp(tape: &mut Tape, bound: &Bound, prefix: &str, n_layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..n_layers {
        h = linear(tape, bound, &format!("{prefix}/{i}"), h)?;
        if i + 1 < n_layers {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    Ok(h)
}

/// Initializes an MLP with the given layer widths (`widths[0]` is the input).
pub fn init_mlp<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    widths: &[usize],
) -> Result<()> {
    for (i, w) in widths.windows(2).enumerate() {
        init_linear(store, rng, &format!("{prefix}/{i}"), w[0], w[1], true)?;
    }
    Ok(())
}
