//! Central finite-difference oracle for analytic gradients.
//!
//! The oracle only ever evaluates the forward pass; it never reads tape
//! adjoints except to obtain the analytic side of the comparison.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::params::{Bound, ParamStore};

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, values).expect("shape and length agree")
}

/// Denominator floor for [`relative_error`]. Central differences at step
/// 1e-5 carry round-off near 1e-10, so a gradient that is exactly zero would
/// otherwise be scored as round-off divided by round-off.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

/// Relative error between two gradient vectors:
/// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric)).max(GRAD_NORM_FLOOR);
    norm(&diff) / scale
}

/// Adds `N(0, scale²)` noise to every parameter so checks run away from
/// initialization's special points (zero heads, zero biases).
pub fn jitter<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.values_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Evaluates `f` at `inputs` (all treated as parameters) and returns the
/// largest per-input relative error between the tape gradient and central
/// finite differences with the given step.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].values()[i];
            probe[k].values_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[k].values_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[k].values_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// [`check_gradients`] over every tensor of a parameter store, with the
/// closure seeing the parameters through a [`Bound`] keyed by name.
pub fn check_param_gradients<F>(store: &ParamStore, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    check_gradients(&tensors, step, |tape, vars| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        f(tape, &bound)
    })
}

/// Like [`check_param_gradients`] but only parameters under `prefix` are
/// perturbed and differentiated; the rest enter as constants.
pub fn check_prefix_gradients<F>(store: &ParamStore, prefix: &str, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let (live, fixed): (Vec<_>, Vec<_>) = store.iter().partition(|(k, _)| k.starts_with(prefix));
    let names: Vec<String> = live.iter().map(|(k, _)| (*k).clone()).collect();
    let tensors: Vec<Tensor> = live.iter().map(|(_, t)| (*t).clone()).collect();
    check_gradients(&tensors, step, |tape, vars| {
        let mut pairs: Vec<(String, Var)> = fixed
            .iter()
            .map(|(k, t)| ((*k).clone(), tape.constant((*t).clone())))
            .collect();
        pairs.extend(names.iter().cloned().zip(vars.iter().copied()));
        f(tape, &Bound::from_pairs(pairs))
    })
}
