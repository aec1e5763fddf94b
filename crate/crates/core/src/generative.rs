//! Encoder `q_E(z|x)`, label-conditional decoder `p_D(x|y_s,y_t,z)` and the
//! training objective built from them and the classifier.
//!
//! All loss builders take a [`NoiseDraw`] holding every random quantity a step
//! needs, so a step is a pure function of (parameters, batch, noise).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{loss_supervised, Classifier, ClassifierConfig, GraphContext};
use crate::error::{Error, Result};
use crate::graph::{LabelGraph, TargetRule};
use crate::numeric::prob::{
    bce_var, gaussian_log_likelihood_var, kl_bernoulli_var, kl_std_normal_var, reparam_sample_var,
};
use crate::numeric::{Tape, Tensor, Var, HALF_LOGVAR_MAX, HALF_LOGVAR_MIN};
use crate::params::{init_linear, linear, Bound, ParamStore, LEAKY_SLOPE};
use crate::rng::{stream_rng, Stream};

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";
pub const CLASSIFIER: &str = "classifier";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    Prior,
    Posterior,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub alpha: f64,
    pub beta: f64,
    pub latent_dim: usize,
    pub prior_clamp_eps: f64,
    pub constraint_label_source: LabelSource,
    pub constraint_stop_grad_classifier: bool,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Fix the decoder scale at 1 instead of learning it.
    pub fixed_sigma_x: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            alpha: 0.1,
            beta: 0.1,
            latent_dim: 8,
            prior_clamp_eps: 1e-3,
            constraint_label_source: LabelSource::Mixed,
            constraint_stop_grad_classifier: true,
            encoder_hidden: vec![64],
            decoder_hidden: vec![64],
            fixed_sigma_x: false,
        }
    }
}

impl GenConfig {
    /// Settings used for image-like data.
    pub fn image_like() -> Self {
        GenConfig {
            alpha: 100.0,
            beta: 0.1,
            ..GenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(self.prior_clamp_eps > 0.0 && self.prior_clamp_eps < 0.5) {
            return Err(Error::Config("prior_clamp_eps must lie in (0, 0.5)".into()));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Label priors derived from the inexact-labeled pool and the class graph.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPrior {
    /// Clamped Bernoulli marginals over `W` (S classes then T classes).
    pub marginals: Vec<f64>,
    pub pool: Vec<Vec<u8>>,
    pub rule: TargetRule,
    pub eps: f64,
}

impl JointPrior {
    pub fn new(pool: Vec<Vec<u8>>, graph: &LabelGraph, eps: f64) -> Result<Self> {
        let rule = TargetRule::from_graph(graph);
        let s = graph.space.n_inexact();
        let mut counts = vec![0.0; s + rule.n_target()];
        for y in &pool {
            if y.len() != s {
                return Err(Error::dim("label pool", &[y.len()], &[s]));
            }
            for (c, &v) in counts.iter_mut().zip(y) {
                *c += f64::from(v);
            }
            for (c, v) in counts[s..].iter_mut().zip(rule.apply(y)) {
                *c += f64::from(v);
            }
        }
        let n = pool.len().max(1) as f64;
        let marginals = counts
            .into_iter()
            .map(|c| (c / n).clamp(eps, 1.0 - eps))
            .collect();
        Ok(JointPrior {
            marginals,
            pool,
            rule,
            eps,
        })
    }

    /// Clamped `p(y_t | y_s)` for each row.
    pub fn target_prior(&self, y_s: &[Vec<u8>]) -> Result<Tensor> {
        let t = self.rule.n_target();
        let mut v = Vec::with_capacity(y_s.len() * t);
        for y in y_s {
            v.extend(
                self.rule
                    .apply(y)
                    .into_iter()
                    .map(|b| f64::from(b).clamp(self.eps, 1.0 - self.eps)),
            );
        }
        Tensor::matrix(y_s.len(), t, v)
    }
}

/// Every random draw one training step consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub eps_l: Tensor,
    pub eps_u: Tensor,
    /// Labels sampled from the pool for prior-sourced constraint rows.
    pub prior_y_s: Vec<Vec<u8>>,
    pub prior_z: Tensor,
    /// `true` picks the posterior row, `false` the prior row.
    pub use_posterior: Vec<bool>,
}

impl NoiseDraw {
    pub fn draw<R: Rng>(
        rng: &mut R,
        n_l: usize,
        n_u: usize,
        latent_dim: usize,
        prior: &JointPrior,
        source: LabelSource,
    ) -> Result<Self> {
        let normal = |rng: &mut R, n: usize| -> Tensor {
            let v = (0..n * latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::matrix(n, latent_dim, v).expect("sizes agree")
        };
        let eps_l = normal(rng, n_l);
        let eps_u = normal(rng, n_u);
        let m = n_l + n_u;
        let prior_z = normal(rng, m);
        if prior.pool.is_empty() && source != LabelSource::Posterior {
            return Err(Error::Empty("labeled pool for prior-sourced labels"));
        }
        let prior_y_s = (0..m)
            .map(|_| {
                if prior.pool.is_empty() {
                    vec![0; prior.marginals.len() - prior.rule.n_target()]
                } else {
                    prior.pool[rng.gen_range(0..prior.pool.len())].clone()
                }
            })
            .collect();
        let coin: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
        let use_posterior = match source {
            LabelSource::Prior => vec![false; m],
            LabelSource::Posterior => vec![true; m],
            LabelSource::Mixed => coin,
        };
        Ok(NoiseDraw {
            eps_l,
            eps_u,
            prior_y_s,
            prior_z,
            use_posterior,
        })
    }
}

/// Per-row components of an evidence lower bound, each `n × 1`.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub recon: Var,
    pub kl_z: Var,
    pub kl_y: Var,
    pub elbo: Var,
    /// Sampled latent code, `n × d_z`.
    pub z: Var,
    /// Clamped classifier probabilities over `W`, `n × |W|`.
    pub q: Var,
}

/// Scalar terms of the objective on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub kl_z: Var,
    pub kl_y: Var,
    pub l_cons: Var,
    pub l_c_s: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_z: f64,
    pub kl_y: f64,
    pub l_cons: f64,
    pub l_c_s: f64,
    pub total: f64,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            recon: tape.value(self.recon).item()?,
            kl_z: tape.value(self.kl_z).item()?,
            kl_y: tape.value(self.kl_y).item()?,
            l_cons: tape.value(self.l_cons).item()?,
            l_c_s: tape.value(self.l_c_s).item()?,
            total: tape.value(self.total).item()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu_z: Tensor,
    pub sigma_z: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub mu_x: Tensor,
    pub sigma_x: Tensor,
}

/// The full generative model: architecture plus graph context. Parameters
/// live in a [`ParamStore`] under `encoder/`, `decoder/` and `classifier/`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub gen: GenConfig,
    pub classifier: Classifier,
    pub ctx: GraphContext,
    pub input_dim: usize,
}

fn repeat_row(row: &[f64], n: usize) -> Tensor {
    let mut v = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        v.extend_from_slice(row);
    }
    Tensor::matrix(n, row.len(), v).expect("sizes agree")
}

fn labels_tensor(rows: &[Vec<u8>], width: usize) -> Result<Tensor> {
    let mut v = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::dim("label rows", &[r.len()], &[width]));
        }
        v.extend(r.iter().map(|&b| f64::from(b)));
    }
    Tensor::matrix(rows.len(), width, v)
}

impl Model {
    pub fn new(
        gen: GenConfig,
        classifier: ClassifierConfig,
        input_dim: usize,
        graph: &LabelGraph,
    ) -> Result<Self> {
        gen.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let ctx = GraphContext::new(graph)?;
        let classifier = Classifier::new(classifier, CLASSIFIER, input_dim, &ctx);
        Ok(Model {
            gen,
            classifier,
            ctx,
            input_dim,
        })
    }

    pub fn n_inexact(&self) -> usize {
        self.ctx.n_inexact
    }

    pub fn n_target(&self) -> usize {
        self.ctx.n_target
    }

    pub fn n_classes(&self) -> usize {
        self.ctx.n_nodes()
    }

    /// Fresh parameters; each module draws from its own sub-stream.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.classifier
            .init(&mut store, &mut stream_rng(seed, Stream::Init, CLASSIFIER))?;
        let d_z = self.gen.latent_dim;
        let mut rng = stream_rng(seed, Stream::Init, ENCODER);
        let h = self.init_trunk(
            &mut store,
            &mut rng,
            ENCODER,
            self.input_dim,
            &self.gen.encoder_hidden,
        )?;
        init_linear(&mut store, &mut rng, &format!("{ENCODER}/mu"), h, d_z, true)?;
        zero_head(&mut store, &format!("{ENCODER}/logvar"), h, d_z)?;
        let mut rng = stream_rng(seed, Stream::Init, DECODER);
        let d_in = d_z + self.n_classes();
        let h = self.init_trunk(
            &mut store,
            &mut rng,
            DECODER,
            d_in,
            &self.gen.decoder_hidden,
        )?;
        init_linear(
            &mut store,
            &mut rng,
            &format!("{DECODER}/mu"),
            h,
            self.input_dim,
            true,
        )?;
        if !self.gen.fixed_sigma_x {
            zero_head(&mut store, &format!("{DECODER}/logvar"), h, self.input_dim)?;
        }
        Ok(store)
    }

    fn init_trunk<R: Rng>(
        &self,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        d_in: usize,
        hidden: &[usize],
    ) -> Result<usize> {
        let mut d = d_in;
        for (i, &w) in hidden.iter().enumerate() {
            init_linear(store, rng, &format!("{prefix}/trunk/{i}"), d, w, true)?;
            d = w;
        }
        Ok(d)
    }

    fn trunk(&self, tape: &mut Tape, bound: &Bound, prefix: &str, n: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..n {
            h = linear(tape, bound, &format!("{prefix}/trunk/{i}"), h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    /// `(μ_z, h_z)` with `h_z` the clamped half-log-variance.
    pub fn encode_var(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let d = tape.value(x).cols();
        if d != self.input_dim {
            return Err(Error::dim("encode", &[d], &[self.input_dim]));
        }
        let h = self.trunk(tape, bound, ENCODER, self.gen.encoder_hidden.len(), x)?;
        let mu = linear(tape, bound, &format!("{ENCODER}/mu"), h)?;
        let hl = linear(tape, bound, &format!("{ENCODER}/logvar"), h)?;
        Ok((mu, tape.clamp(hl, HALF_LOGVAR_MIN, HALF_LOGVAR_MAX)))
    }

    /// `(μ_x, h_x)` for decoder input `[z, y_s, y_t]`.
    pub fn decode_var(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        y_s: Var,
        y_t: Option<Var>,
    ) -> Result<(Var, Var)> {
        let zc = tape.value(z).cols();
        let sc = tape.value(y_s).cols();
        let tc = y_t.map_or(0, |v| tape.value(v).cols());
        if zc != self.gen.latent_dim || sc != self.n_inexact() || tc != self.n_target() {
            return Err(Error::dim(
                "decode",
                &[zc, sc, tc],
                &[self.gen.latent_dim, self.n_inexact(), self.n_target()],
            ));
        }
        let input = match y_t {
            Some(y_t) => tape.concat_cols(&[z, y_s, y_t])?,
            None => tape.concat_cols(&[z, y_s])?,
        };
        let h = self.trunk(tape, bound, DECODER, self.gen.decoder_hidden.len(), input)?;
        let mu = linear(tape, bound, &format!("{DECODER}/mu"), h)?;
        let hl = if self.gen.fixed_sigma_x {
            let n = tape.value(mu).rows();
            tape.constant(Tensor::zeros(vec![n, self.input_dim]))
        } else {
            let hl = linear(tape, bound, &format!("{DECODER}/logvar"), h)?;
            tape.clamp(hl, HALF_LOGVAR_MIN, HALF_LOGVAR_MAX)
        };
        Ok((mu, hl))
    }

    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let bound = store
            .subset(&format!("{ENCODER}/"))
            .bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let (mu, hl) = self.encode_var(&mut tape, &bound, xv)?;
        Ok(EncoderOutput {
            mu_z: tape.value(mu).clone(),
            sigma_z: exp_tensor(tape.value(hl)),
        })
    }

    pub fn decode(
        &self,
        store: &ParamStore,
        z: &Tensor,
        y_s: &Tensor,
        y_t: Option<&Tensor>,
    ) -> Result<DecoderOutput> {
        let mut tape = Tape::new();
        let bound = store
            .subset(&format!("{DECODER}/"))
            .bind_constant(&mut tape);
        let zv = tape.constant(z.clone());
        let sv = tape.constant(y_s.clone());
        let tv = y_t.map(|t| tape.constant(t.clone()));
        let (mu, hl) = self.decode_var(&mut tape, &bound, zv, sv, tv)?;
        Ok(DecoderOutput {
            mu_x: tape.value(mu).clone(),
            sigma_x: exp_tensor(tape.value(hl)),
        })
    }

    fn probs_split(&self, tape: &mut Tape, q: Var) -> Result<(Var, Option<Var>)> {
        let s = self.n_inexact();
        let w = self.n_classes();
        let q_t = if w > s {
            Some(tape.slice_cols(q, s, w)?)
        } else {
            None
        };
        Ok((tape.slice_cols(q, 0, s)?, q_t))
    }

    /// Labeled bound: reconstruction with soft target labels, latent KL, and
    /// KL of the target predictions against the clamped rule prior.
    pub fn elbo_labeled(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        y_s: &[Vec<u8>],
        prior: &JointPrior,
        eps: &Tensor,
    ) -> Result<ElboTerms> {
        let n = tape.value(x).rows();
        if y_s.len() != n {
            return Err(Error::dim("elbo_labeled", &[y_s.len()], &[n]));
        }
        let ys = tape.constant(labels_tensor(y_s, self.n_inexact())?);
        let (mu, hl) = self.encode_var(tape, bound, x)?;
        let sigma = tape.exp(hl);
        let e = tape.constant(eps.clone());
        let z = reparam_sample_var(tape, mu, sigma, e)?;
        let q = self.classifier.probs(tape, bound, &self.ctx, x)?;
        let (_, q_t) = self.probs_split(tape, q)?;
        let (mu_x, hl_x) = self.decode_var(tape, bound, z, ys, q_t)?;
        let recon = gaussian_log_likelihood_var(tape, x, mu_x, hl_x)?;
        let kl_z = kl_std_normal_var(tape, mu, hl)?;
        let kl_y = match q_t {
            None => tape.constant(Tensor::zeros(vec![n, 1])),
            Some(q_t) => {
                let p = tape.constant(prior.target_prior(y_s)?);
                kl_bernoulli_var(tape, q_t, p)?
            }
        };
        let a = tape.sub(recon, kl_z)?;
        let elbo = tape.sub(a, kl_y)?;
        Ok(ElboTerms {
            recon,
            kl_z,
            kl_y,
            elbo,
            z,
            q,
        })
    }

    /// Unlabeled bound with both label vectors soft and a factorized prior.
    pub fn elbo_unlabeled(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        prior: &JointPrior,
        eps: &Tensor,
    ) -> Result<ElboTerms> {
        let n = tape.value(x).rows();
        let (mu, hl) = self.encode_var(tape, bound, x)?;
        let sigma = tape.exp(hl);
        let e = tape.constant(eps.clone());
        let z = reparam_sample_var(tape, mu, sigma, e)?;
        let q = self.classifier.probs(tape, bound, &self.ctx, x)?;
        let (q_s, q_t) = self.probs_split(tape, q)?;
        let (mu_x, hl_x) = self.decode_var(tape, bound, z, q_s, q_t)?;
        let recon = gaussian_log_likelihood_var(tape, x, mu_x, hl_x)?;
        let kl_z = kl_std_normal_var(tape, mu, hl)?;
        let p = tape.constant(repeat_row(&prior.marginals, n));
        let kl_y = kl_bernoulli_var(tape, q, p)?;
        let a = tape.sub(recon, kl_z)?;
        let elbo = tape.sub(a, kl_y)?;
        Ok(ElboTerms {
            recon,
            kl_z,
            kl_y,
            elbo,
            z,
            q,
        })
    }

    /// Constraint loss: decode assigned labels, classify the decoder mean, and
    /// score the classifier against the assignment.
    ///
    /// `post_labels` (`m × |W|`) and `post_z` (`m × d_z`) are the posterior
    /// rows; prior rows come from `noise`. The assignment target is never
    /// differentiated. With `constraint_stop_grad_classifier` only the decoder
    /// learns from this term: the judge, the posterior labels and the
    /// posterior latent code are all detached.
    pub fn loss_constraint(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        post_labels: Var,
        post_z: Var,
        noise: &NoiseDraw,
        prior: &JointPrior,
    ) -> Result<Var> {
        let m = noise.use_posterior.len();
        let w = self.n_classes();
        let s = self.n_inexact();
        if tape.value(post_labels).rows() != m || tape.value(post_z).rows() != m {
            return Err(Error::dim(
                "loss_constraint",
                &[tape.value(post_labels).rows(), tape.value(post_z).rows()],
                &[m, m],
            ));
        }
        let stop = self.gen.constraint_stop_grad_classifier;
        let post_labels = if stop {
            tape.detach(post_labels)
        } else {
            post_labels
        };
        let post_z = if stop { tape.detach(post_z) } else { post_z };

        let mut prior_rows = Vec::with_capacity(m * w);
        for y in &noise.prior_y_s {
            prior_rows.extend(y.iter().map(|&b| f64::from(b)));
            prior_rows.extend(prior.rule.apply(y).into_iter().map(f64::from));
        }
        let prior_labels = tape.constant(Tensor::matrix(m, w, prior_rows)?);
        let prior_z = tape.constant(noise.prior_z.clone());

        let pick = |flag: bool| if flag { 1.0 } else { 0.0 };
        let mask_w: Vec<f64> = noise
            .use_posterior
            .iter()
            .flat_map(|&f| std::iter::repeat_n(pick(f), w))
            .collect();
        let mask_z: Vec<f64> = noise
            .use_posterior
            .iter()
            .flat_map(|&f| std::iter::repeat_n(pick(f), self.gen.latent_dim))
            .collect();
        let labels = blend(
            tape,
            post_labels,
            prior_labels,
            Tensor::matrix(m, w, mask_w)?,
        )?;
        let z = blend(
            tape,
            post_z,
            prior_z,
            Tensor::matrix(m, self.gen.latent_dim, mask_z)?,
        )?;

        let ys = tape.slice_cols(labels, 0, s)?;
        let yt = if w > s {
            Some(tape.slice_cols(labels, s, w)?)
        } else {
            None
        };
        let (x_hat, _) = self.decode_var(tape, bound, z, ys, yt)?;
        let judge = if stop {
            bound.detached(tape, &format!("{CLASSIFIER}/"))
        } else {
            bound.clone()
        };
        let p = self.classifier.probs(tape, &judge, &self.ctx, x_hat)?;
        let target = if stop { tape.detach(labels) } else { labels };
        let rows = bce_var(tape, p, target)?;
        Ok(tape.mean(rows))
    }

    /// The full objective on a labeled and an unlabeled batch.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_l: &Tensor,
        y_s: &[Vec<u8>],
        x_u: &Tensor,
        prior: &JointPrior,
        noise: &NoiseDraw,
    ) -> Result<LossVars> {
        if x_l.rows() == 0 || x_u.rows() == 0 {
            return Err(Error::Empty("training batch"));
        }
        let xl = tape.constant(x_l.clone());
        let xu = tape.constant(x_u.clone());
        let lab = self.elbo_labeled(tape, bound, xl, y_s, prior, &noise.eps_l)?;
        let unl = self.elbo_unlabeled(tape, bound, xu, prior, &noise.eps_u)?;

        let ys = tape.constant(labels_tensor(y_s, self.n_inexact())?);
        let l_c_s = loss_supervised(tape, lab.q, ys, self.n_inexact())?;

        let (_, qt_l) = self.probs_split(tape, lab.q)?;
        let post_l = match qt_l {
            Some(qt_l) => tape.concat_cols(&[ys, qt_l])?,
            None => ys,
        };
        let post_labels = tape.concat_rows(&[post_l, unl.q])?;
        let post_z = tape.concat_rows(&[lab.z, unl.z])?;
        let l_cons = self.loss_constraint(tape, bound, post_labels, post_z, noise, prior)?;

        let pair_mean = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
            let ma = tape.mean(a);
            let mb = tape.mean(b);
            tape.add(ma, mb)
        };
        let recon = pair_mean(tape, lab.recon, unl.recon)?;
        let kl_z = pair_mean(tape, lab.kl_z, unl.kl_z)?;
        let kl_y = pair_mean(tape, lab.kl_y, unl.kl_y)?;

        let neg = tape.scale(recon, -1.0);
        let t = tape.add(neg, kl_z)?;
        let t = tape.add(t, kl_y)?;
        let c = tape.scale(l_cons, self.gen.alpha);
        let t = tape.add(t, c)?;
        let b = tape.scale(l_c_s, self.gen.beta);
        let total = tape.add(t, b)?;
        Ok(LossVars {
            recon,
            kl_z,
            kl_y,
            l_cons,
            l_c_s,
            total,
        })
    }

    /// Classifier pretraining objective: `β·L_C^s` plus the labeled target KL.
    pub fn classifier_pretrain_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_l: &Tensor,
        y_s: &[Vec<u8>],
        prior: &JointPrior,
    ) -> Result<Var> {
        let xl = tape.constant(x_l.clone());
        let q = self.classifier.probs(tape, bound, &self.ctx, xl)?;
        let ys = tape.constant(labels_tensor(y_s, self.n_inexact())?);
        let l = loss_supervised(tape, q, ys, self.n_inexact())?;
        let l = tape.scale(l, self.gen.beta);
        let (_, Some(q_t)) = self.probs_split(tape, q)? else {
            return Ok(l);
        };
        let p = tape.constant(prior.target_prior(y_s)?);
        let kl = kl_bernoulli_var(tape, q_t, p)?;
        let kl = tape.mean(kl);
        tape.add(l, kl)
    }

    /// Draws `n` labeled instances: labels from `sampler`, targets from the
    /// rule, `z ~ N(0, I)`, and `x` as the decoder mean. Instance `i` depends
    /// only on the first `i + 1` draws, so smaller sets are prefixes.
    pub fn sample_labeled<R: Rng>(
        &self,
        store: &ParamStore,
        n: usize,
        prior: &JointPrior,
        sampler: &LabelSampler,
        rng: &mut R,
    ) -> Result<Vec<Synthetic>> {
        if n == 0 {
            return Err(Error::Argument("number of samples must be positive".into()));
        }
        let d_z = self.gen.latent_dim;
        let mut ys_rows = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n * d_z);
        for i in 0..n {
            let y_s = match sampler {
                LabelSampler::Empirical => {
                    if prior.pool.is_empty() {
                        return Err(Error::Empty("labeled pool for sampling"));
                    }
                    prior.pool[rng.gen_range(0..prior.pool.len())].clone()
                }
                LabelSampler::Given(list) => {
                    if list.is_empty() {
                        return Err(Error::Empty("label list for sampling"));
                    }
                    list[i % list.len()].clone()
                }
            };
            if y_s.len() != self.n_inexact() {
                return Err(Error::dim(
                    "sample_labeled",
                    &[y_s.len()],
                    &[self.n_inexact()],
                ));
            }
            ys_rows.push(y_s);
            z.extend((0..d_z).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        let yt_rows: Vec<Vec<u8>> = ys_rows.iter().map(|y| prior.rule.apply(y)).collect();
        let yt = (self.n_target() > 0)
            .then(|| labels_tensor(&yt_rows, self.n_target()))
            .transpose()?;
        let out = self.decode(
            store,
            &Tensor::matrix(n, d_z, z)?,
            &labels_tensor(&ys_rows, self.n_inexact())?,
            yt.as_ref(),
        )?;
        Ok(ys_rows
            .into_iter()
            .zip(yt_rows)
            .enumerate()
            .map(|(i, (y_s, y_t))| Synthetic {
                x: out.mu_x.row(i).to_vec(),
                y_s,
                y_t,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelSampler {
    /// Uniform draws from the labeled pool.
    Empirical,
    /// Cycle through a caller-provided list.
    Given(Vec<Vec<u8>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Synthetic {
    pub x: Vec<f64>,
    pub y_s: Vec<u8>,
    pub y_t: Vec<u8>,
}

/// Scale heads start at zero so every σ is 1 before training.
fn zero_head(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.insert(
        format!("{prefix}/weight"),
        Tensor::zeros(vec![fan_in, fan_out]),
    )?;
    store.insert(format!("{prefix}/bias"), Tensor::zeros(vec![1, fan_out]))
}

fn exp_tensor(t: &Tensor) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        t.values().iter().map(|v| v.exp()).collect(),
    )
    .expect("same shape")
}

/// `mask ⊙ a + (1 − mask) ⊙ b` for a constant 0/1 mask.
fn blend(tape: &mut Tape, a: Var, b: Var, mask: Tensor) -> Result<Var> {
    let inv = Tensor::new(
        mask.shape().to_vec(),
        mask.values().iter().map(|v| 1.0 - v).collect(),
    )?;
    let m = tape.constant(mask);
    let im = tape.constant(inv);
    let pa = tape.mul(a, m)?;
    let pb = tape.mul(b, im)?;
    tape.add(pa, pb)
}
