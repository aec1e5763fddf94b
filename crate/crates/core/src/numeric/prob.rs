//! Sampling and closed-form divergence terms.
//!
//! Each term comes in two flavors: a plain function on tensors that validates
//! its domain, and a tape builder used inside losses. The tape builders return
//! per-row values (`n×1`) so callers can average over a batch.

use std::f64::consts::PI;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `0.5 * ln(2π)`
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `mu + sigma ⊙ eps`.
pub fn reparam_sample(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape("reparam_sample", mu, sigma)?;
    same_shape("reparam_sample", mu, eps)?;
    if sigma.values().iter().any(|&s| s < 0.0) {
        return Err(Error::Domain("sigma must be non-negative".into()));
    }
    let values = mu
        .values()
        .iter()
        .zip(sigma.values())
        .zip(eps.values())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), values)
}

/// KL between a diagonal Gaussian and the standard normal, summed over all entries.
pub fn kl_diag_gaussian_vs_std_normal(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    same_shape("kl_diag_gaussian", mu, sigma)?;
    let mut acc = 0.0;
    for (&m, &s) in mu.values().iter().zip(sigma.values()) {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got {s}")));
        }
        acc += 1.0 + (s * s).ln() - m * m - s * s;
    }
    Ok(-0.5 * acc)
}

/// KL between products of independent Bernoulli factors.
pub fn kl_bernoulli_vec(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::dim("kl_bernoulli_vec", &[q.len()], &[p.len()]));
    }
    let mut acc = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        for v in [qi, pi] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!(
                    "Bernoulli probability {v} outside (0,1); clamp before calling"
                )));
            }
        }
        acc += qi * (qi / pi).ln() + (1.0 - qi) * ((1.0 - qi) / (1.0 - pi)).ln();
    }
    Ok(acc)
}

pub fn gaussian_log_likelihood(x: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    same_shape("gaussian_log_likelihood", x, mu)?;
    same_shape("gaussian_log_likelihood", x, sigma)?;
    let mut acc = 0.0;
    for ((&xi, &mi), &si) in x.values().iter().zip(mu.values()).zip(sigma.values()) {
        if !(si > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got {si}")));
        }
        let r = xi - mi;
        acc += -0.5 * (2.0 * PI).ln() - si.ln() - r * r / (2.0 * si * si);
    }
    Ok(acc)
}

pub fn reparam_sample_var(tape: &mut Tape, mu: Var, sigma: Var, eps: Var) -> Result<Var> {
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Per-row Gaussian KL against N(0, I), parameterized by the half-log-variance
/// `h = ln σ`: `−½ Σ (1 + 2h − μ² − e^{2h})`.
pub fn kl_std_normal_var(tape: &mut Tape, mu: Var, half_logvar: Var) -> Result<Var> {
    let two_h = tape.scale(half_logvar, 2.0);
    let var = tape.exp(two_h);
    let mu2 = tape.square(mu);
    let a = tape.add_scalar(two_h, 1.0);
    let b = tape.sub(a, mu2)?;
    let c = tape.sub(b, var)?;
    let rows = tape.sum_cols(c)?;
    Ok(tape.scale(rows, -0.5))
}

/// Per-row Bernoulli KL. `q` and `p` must already be strictly inside (0,1).
pub fn kl_bernoulli_var(tape: &mut Tape, q: Var, p: Var) -> Result<Var> {
    let lq = tape.log(q);
    let lp = tape.log(p);
    let q1 = tape.one_minus(q);
    let p1 = tape.one_minus(p);
    let lq1 = tape.log(q1);
    let lp1 = tape.log(p1);
    let d1 = tape.sub(lq, lp)?;
    let t1 = tape.mul(q, d1)?;
    let d2 = tape.sub(lq1, lp1)?;
    let t2 = tape.mul(q1, d2)?;
    let s = tape.add(t1, t2)?;
    tape.sum_cols(s)
}

/// Per-row Gaussian log-density with `σ = exp(h)`.
pub fn gaussian_log_likelihood_var(
    tape: &mut Tape,
    x: Var,
    mu: Var,
    half_logvar: Var,
) -> Result<Var> {
    let r = tape.sub(x, mu)?;
    let r2 = tape.square(r);
    let neg_two_h = tape.scale(half_logvar, -2.0);
    let inv_var = tape.exp(neg_two_h);
    let quad = tape.mul(r2, inv_var)?;
    let quad = tape.scale(quad, -0.5);
    let t = tape.sub(quad, half_logvar)?;
    let t = tape.add_scalar(t, -HALF_LOG_2PI);
    tape.sum_cols(t)
}

/// Per-row binary cross-entropy `−Σ [t ln p + (1−t) ln(1−p)]`; `p` must be
/// strictly inside (0,1).
pub fn bce_var(tape: &mut Tape, p: Var, target: Var) -> Result<Var> {
    let lp = tape.log(p);
    let p1 = tape.one_minus(p);
    let lp1 = tape.log(p1);
    let t1 = tape.one_minus(target);
    let a = tape.mul(target, lp)?;
    let b = tape.mul(t1, lp1)?;
    let s = tape.add(a, b)?;
    let rows = tape.sum_cols(s)?;
    Ok(tape.scale(rows, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{check_gradients, random_tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn reparam_degenerate_cases() {
        let mu = v(&[1.0, -2.0]);
        assert_eq!(
            reparam_sample(&mu, &v(&[3.0, 4.0]), &v(&[0.0, 0.0])).unwrap(),
            mu
        );
        assert_eq!(
            reparam_sample(&mu, &v(&[0.0, 0.0]), &v(&[0.7, -1.3])).unwrap(),
            mu
        );
        assert!(reparam_sample(&mu, &v(&[1.0]), &v(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn reparam_monte_carlo_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mu = Tensor::full(vec![n], 1.0);
        let sigma = Tensor::full(vec![n], 2.0);
        let eps = Tensor::vector((0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let z = reparam_sample(&mu, &sigma, &eps).unwrap();
        let mean = z.values().iter().sum::<f64>() / n as f64;
        let se = 2.0 / (n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn reparam_gradient_skips_eps() {
        let mut tape = Tape::new();
        let mu = tape.param(v(&[0.5]));
        let s = tape.param(v(&[2.0]));
        let e = tape.constant(v(&[0.25]));
        let z = reparam_sample_var(&mut tape, mu, s, e).unwrap();
        let l = tape.sum(z);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(mu).unwrap(), &[1.0]);
        assert_eq!(tape.grad(s).unwrap(), &[0.25]);
        assert!(tape.grad(e).is_none());
    }

    #[test]
    fn gaussian_kl_closed_forms() {
        assert_eq!(
            kl_diag_gaussian_vs_std_normal(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(),
            0.0
        );
        let k = kl_diag_gaussian_vs_std_normal(&v(&[1.0]), &v(&[1.0])).unwrap();
        assert!((k - 0.5).abs() < 1e-15);
        assert!(matches!(
            kl_diag_gaussian_vs_std_normal(&v(&[0.0]), &v(&[0.0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bernoulli_kl_hand_value() {
        let k = kl_bernoulli_vec(&[0.5], &[0.25]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((k - expected).abs() < 1e-15);
        assert!((k - 0.1438).abs() < 1e-4);
        assert_eq!(kl_bernoulli_vec(&[0.3, 0.8], &[0.3, 0.8]).unwrap(), 0.0);
        assert!(matches!(
            kl_bernoulli_vec(&[1.0], &[0.5]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn log_likelihood_hand_values() {
        let a = gaussian_log_likelihood(&v(&[0.3]), &v(&[0.3]), &v(&[1.0])).unwrap();
        assert!((a + 0.918_938_533_204_672_8).abs() < 1e-12);
        let b = gaussian_log_likelihood(&v(&[1.0]), &v(&[0.0]), &v(&[1.0])).unwrap();
        assert!((b + 1.418_938_533_204_673).abs() < 1e-12);
    }

    #[test]
    fn log_density_integrates_to_one() {
        let (lo, hi, n) = (-12.0, 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * h;
            total += gaussian_log_likelihood(&v(&[x]), &v(&[0.7]), &v(&[1.3]))
                .unwrap()
                .exp()
                * h;
        }
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn tape_terms_agree_with_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu = random_tensor(&mut rng, vec![1, 5], 1.0);
        let h = random_tensor(&mut rng, vec![1, 5], 0.5);
        let x = random_tensor(&mut rng, vec![1, 5], 1.0);
        let sigma = Tensor::new(vec![1, 5], h.values().iter().map(|v| v.exp()).collect()).unwrap();

        let mut tape = Tape::new();
        let (vm, vh, vx) = (
            tape.constant(mu.clone()),
            tape.constant(h.clone()),
            tape.constant(x.clone()),
        );
        let kl = kl_std_normal_var(&mut tape, vm, vh).unwrap();
        let ll = gaussian_log_likelihood_var(&mut tape, vx, vm, vh).unwrap();
        let kl_plain = kl_diag_gaussian_vs_std_normal(&mu, &sigma).unwrap();
        let ll_plain = gaussian_log_likelihood(&x, &mu, &sigma).unwrap();
        assert!((tape.value(kl).item().unwrap() - kl_plain).abs() < 1e-12);
        assert!((tape.value(ll).item().unwrap() - ll_plain).abs() < 1e-12);
    }

    #[test]
    fn tape_terms_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu = random_tensor(&mut rng, vec![3, 4], 1.0);
            let h = random_tensor(&mut rng, vec![3, 4], 0.4);
            let x = random_tensor(&mut rng, vec![3, 4], 1.0);
            let q =
                Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
            let p =
                Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
            let err = check_gradients(&[mu, h, x, q, p], 1e-5, |t, v| {
                let a = kl_std_normal_var(t, v[0], v[1])?;
                let b = gaussian_log_likelihood_var(t, v[2], v[0], v[1])?;
                let c = kl_bernoulli_var(t, v[3], v[4])?;
                let d = bce_var(t, v[3], v[4])?;
                let s = t.sub(a, b)?;
                let s = t.add(s, c)?;
                let s = t.add(s, d)?;
                Ok(t.sum(s))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
