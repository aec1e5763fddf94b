//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    AdaptiveMoment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Optimizer state, serializable so a training run can resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter accepted by `trainable` that has
    /// a gradient, then clears all gradient buffers.
    pub fn step(&mut self, store: &mut ParamStore, trainable: impl Fn(&str) -> bool) {
        for (name, tensor) in store.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in tensor.values_mut().iter_mut().zip(&g) {
                        *w -= self.lr * gv;
                    }
                }
                OptimizerKind::AdaptiveMoment => {
                    let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                        t: 0,
                    });
                    st.t += 1;
                    let bc1 = 1.0 - self.beta1.powi(st.t as i32);
                    let bc2 = 1.0 - self.beta2.powi(st.t as i32);
                    for (i, w) in tensor.values_mut().iter_mut().enumerate() {
                        st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g[i];
                        st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mh = st.m[i] / bc1;
                        let vh = st.v[i] / bc2;
                        *w -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![1.0, 2.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::vector(vec![3.0]).unwrap()).unwrap();
        s.get_mut("a")
            .unwrap()
            .accumulate_grad(&[1.0, 1.0])
            .unwrap();
        s.get_mut("b").unwrap().accumulate_grad(&[1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, 0.1);
        opt.step(&mut s, |n| n == "a");
        assert_eq!(s.get("b").unwrap().values(), &[3.0]);
        assert!((s.get("a").unwrap().values()[0] - 0.9).abs() < 1e-6);
        assert!(s.get("a").unwrap().grad().is_none());
    }

    #[test]
    fn sgd_step() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        s.get_mut("a").unwrap().accumulate_grad(&[2.0]).unwrap();
        Optimizer::new(OptimizerKind::Sgd, 0.25).step(&mut s, |_| true);
        assert_eq!(s.get("a").unwrap().values(), &[0.5]);
    }
}
