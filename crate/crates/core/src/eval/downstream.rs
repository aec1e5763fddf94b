//! Fresh downstream classifiers trained on complete labels, the
//! entropy-regularized semi-supervised baseline, and a linear probe.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierConfig, ClassifierKind, GraphContext};
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::eval::metrics::MetricReport;
use crate::generative::Synthetic;
use crate::graph::LabelGraph;
use crate::numeric::prob::bce_var;
use crate::numeric::{Tape, Tensor, Var, PROB_EPS};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{init_linear, linear, ParamStore};
use crate::rng::{stream_rng, Stream};

const PREFIX: &str = "downstream";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Independent,
    GraphAware,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub arch: Arch,
    pub extractor_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub gcn_hidden: Vec<usize>,
    /// Gradient steps, independent of the training-set size so that runs
    /// with and without synthetic data get the same budget.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the unlabeled entropy term in the semi-supervised baseline.
    pub entropy_lambda: f64,
    /// Also report metrics for the inexact classes.
    pub report_inexact: bool,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            arch: Arch::GraphAware,
            extractor_hidden: vec![64],
            feature_dim: 32,
            gcn_hidden: vec![32],
            steps: 1500,
            batch_size: 64,
            lr: 1e-3,
            entropy_lambda: 0.1,
            report_inexact: false,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "downstream batch_size and feature_dim must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.entropy_lambda < 0.0 {
            return Err(Error::Config(
                "downstream lr must be positive and entropy_lambda non-negative".into(),
            ));
        }
        Ok(())
    }

    fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            kind: match self.arch {
                Arch::Independent => ClassifierKind::Independent,
                Arch::GraphAware => ClassifierKind::Gcn,
            },
            extractor_hidden: self.extractor_hidden.clone(),
            feature_dim: self.feature_dim,
            gcn_hidden: self.gcn_hidden.clone(),
        }
    }
}

/// A fully labeled training or test instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y_s: Vec<u8>,
    pub y_t: Vec<u8>,
}

impl Example {
    pub fn labels(&self) -> Vec<u8> {
        let mut y = self.y_s.clone();
        y.extend_from_slice(&self.y_t);
        y
    }
}

impl From<Synthetic> for Example {
    fn from(s: Synthetic) -> Self {
        Example {
            x: s.x,
            y_s: s.y_s,
            y_t: s.y_t,
        }
    }
}

impl TryFrom<&Instance> for Example {
    type Error = Error;

    fn try_from(i: &Instance) -> Result<Self> {
        match (&i.y_s, &i.y_t) {
            (Some(y_s), Some(y_t)) => Ok(Example {
                x: i.x.clone(),
                y_s: y_s.clone(),
                y_t: y_t.clone(),
            }),
            _ => Err(Error::Argument(
                "instance lacks inexact or target labels".into(),
            )),
        }
    }
}

pub fn examples(instances: &[Instance]) -> Result<Vec<Example>> {
    instances.iter().map(Example::try_from).collect()
}

fn x_tensor<'a>(rows: impl ExactSizeIterator<Item = &'a Vec<f64>>) -> Result<Tensor> {
    let rows: Vec<&Vec<f64>> = rows.collect();
    Tensor::from_rows(&rows)
}

fn label_tensor(rows: &[Vec<u8>]) -> Result<Tensor> {
    let f: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    Tensor::from_rows(&f)
}

/// Index batches for `steps` steps: consecutive chunks of per-pass
/// permutations.
fn batch_plan(n: usize, batch: usize, steps: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut perm: Vec<usize> = Vec::new();
    let mut pos = 0;
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch {
            if pos == perm.len() {
                perm = (0..n).collect();
                perm.shuffle(rng);
                pos = 0;
            }
            b.push(perm[pos]);
            pos += 1;
        }
        out.push(b);
    }
    out
}

/// Mean Bernoulli entropy over the elements of clamped probabilities.
pub fn mean_entropy_var(tape: &mut Tape, p: Var) -> Result<Var> {
    let lp = tape.log(p);
    let q = tape.one_minus(p);
    let lq = tape.log(q);
    let a = tape.mul(p, lp)?;
    let b = tape.mul(q, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// A trained downstream classifier.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub classifier: Classifier,
    pub ctx: GraphContext,
    pub params: ParamStore,
}

impl Fitted {
    /// Probabilities for every class, one row per input.
    pub fn scores(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let p = self
            .classifier
            .predict(&self.params, &self.ctx, &x_tensor(x.iter())?)?;
        Ok((0..p.rows()).map(|i| p.row(i).to_vec()).collect())
    }

    /// Mean entropy of clamped predictions on `x`.
    pub fn mean_entropy(&self, x: &[Vec<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&self.scores(x)?)?);
        let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        let h = mean_entropy_var(&mut tape, p)?;
        tape.value(h).item()
    }

    /// Metrics over target classes (and inexact classes if configured).
    pub fn evaluate(
        &self,
        test: &[Example],
        graph: &LabelGraph,
        report_inexact: bool,
        seed: u64,
        config_hash: &str,
    ) -> Result<MetricReport> {
        if test.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let s = graph.space.n_inexact();
        let x: Vec<Vec<f64>> = test.iter().map(|e| e.x.clone()).collect();
        let scores = self.scores(&x)?;
        let labels: Vec<Vec<u8>> = test.iter().map(Example::labels).collect();
        let start = if report_inexact { 0 } else { s };
        let classes: Vec<String> = graph.space.all_classes().skip(start).cloned().collect();
        let cut = |m: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            m.into_iter().map(|r| r[start..].to_vec()).collect()
        };
        let labels: Vec<Vec<u8>> = labels.into_iter().map(|r| r[start..].to_vec()).collect();
        MetricReport::from_scores(&classes, &cut(scores), &labels, seed, config_hash)
    }
}

/// Trains a fresh classifier of the configured architecture on all labels
/// of `train`. With `unlabeled` and a positive `entropy_lambda`, the mean
/// prediction entropy on an unlabeled batch is added to every step's loss.
pub fn fit_downstream(
    train: &[Example],
    unlabeled: Option<&[Vec<f64>]>,
    graph: &LabelGraph,
    config: &DownstreamConfig,
    seed: u64,
) -> Result<Fitted> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("downstream training set"));
    }
    let w = graph.space.n_all();
    let d = train[0].x.len();
    for e in train {
        if e.x.len() != d || e.y_s.len() + e.y_t.len() != w {
            return Err(Error::dim(
                "downstream example",
                &[e.x.len(), e.y_s.len() + e.y_t.len()],
                &[d, w],
            ));
        }
    }
    let ctx = GraphContext::new(graph)?;
    let classifier = Classifier::new(config.classifier_config(), PREFIX, d, &ctx);
    let mut params = ParamStore::new();
    classifier.init(
        &mut params,
        &mut stream_rng(seed, Stream::Downstream, "init"),
    )?;

    let entropy = match unlabeled {
        Some(u) if config.entropy_lambda > 0.0 => {
            if u.is_empty() {
                return Err(Error::Empty("unlabeled set for entropy regularization"));
            }
            Some(u)
        }
        _ => None,
    };
    let x_all = x_tensor(train.iter().map(|e| &e.x))?;
    let y_all = label_tensor(&train.iter().map(Example::labels).collect::<Vec<_>>())?;
    let plan = batch_plan(
        train.len(),
        config.batch_size,
        config.steps,
        &mut stream_rng(seed, Stream::Downstream, "batches"),
    );
    let u_plan = entropy.map(|u| {
        batch_plan(
            u.len(),
            config.batch_size,
            config.steps,
            &mut stream_rng(seed, Stream::Downstream, "unlabeled-batches"),
        )
    });
    let gather = |t: &Tensor, idx: &[usize]| -> Result<Tensor> {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row(i)).collect();
        Tensor::from_rows(&rows)
    };
    let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, config.lr);
    for (k, idx) in plan.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(gather(&x_all, idx)?);
        let y = tape.constant(gather(&y_all, idx)?);
        let p = classifier.probs(&mut tape, &bound, &ctx, x)?;
        let rows = bce_var(&mut tape, p, y)?;
        let mut loss = tape.mean(rows);
        if let (Some(u), Some(up)) = (entropy, &u_plan) {
            let xu = x_tensor(up[k].iter().map(|&i| &u[i]))?;
            let xu = tape.constant(xu);
            let pu = classifier.probs(&mut tape, &bound, &ctx, xu)?;
            let h = mean_entropy_var(&mut tape, pu)?;
            let h = tape.scale(h, config.entropy_lambda);
            loss = tape.add(loss, h)?;
        }
        if !tape.value(loss).item()?.is_finite() {
            return Err(Error::Domain(format!(
                "downstream loss non-finite at step {k}"
            )));
        }
        tape.backward(loss)?;
        params.accumulate_grads(&tape, &bound)?;
        opt.step(&mut params, |_| true);
    }
    Ok(Fitted {
        classifier,
        ctx,
        params,
    })
}

/// Fits on `train` and reports metrics on `test`.
pub fn train_downstream(
    train: &[Example],
    test: &[Example],
    graph: &LabelGraph,
    config: &DownstreamConfig,
    seed: u64,
    config_hash: &str,
) -> Result<MetricReport> {
    fit_downstream(train, None, graph, config, seed)?.evaluate(
        test,
        graph,
        config.report_inexact,
        seed,
        config_hash,
    )
}

/// Independent classifier on `d_e` with entropy regularization on `d_u`.
pub fn baseline_entropy_reg(
    d_e: &[Example],
    d_u: &[Vec<f64>],
    test: &[Example],
    graph: &LabelGraph,
    config: &DownstreamConfig,
    seed: u64,
    config_hash: &str,
) -> Result<MetricReport> {
    if d_u.is_empty() {
        return Err(Error::Empty("unlabeled set for entropy regularization"));
    }
    let cfg = DownstreamConfig {
        arch: Arch::Independent,
        ..config.clone()
    };
    fit_downstream(d_e, Some(d_u), graph, &cfg, seed)?.evaluate(
        test,
        graph,
        cfg.report_inexact,
        seed,
        config_hash,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 500,
            lr: 0.05,
        }
    }
}

/// Logistic regression from `train_x` to each column of `train_y`, full
/// batch; returns probabilities for `test_x`.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[Vec<u8>],
    test_x: &[Vec<f64>],
    config: &ProbeConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Empty("probe inputs"));
    }
    if train_x.len() != train_y.len() {
        return Err(Error::dim("probe rows", &[train_x.len()], &[train_y.len()]));
    }
    let d = train_x[0].len();
    let k = train_y[0].len();
    let mut params = ParamStore::new();
    init_linear(
        &mut params,
        &mut stream_rng(seed, Stream::Probe, "init"),
        "probe",
        d,
        k,
        true,
    )?;
    let x = x_tensor(train_x.iter())?;
    let y = label_tensor(train_y)?;
    let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, config.lr);
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let z = linear(&mut tape, &bound, "probe", xv)?;
        let p = tape.sigmoid(z);
        let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        let rows = bce_var(&mut tape, p, yv)?;
        let loss = tape.mean(rows);
        tape.backward(loss)?;
        params.accumulate_grads(&tape, &bound)?;
        opt.step(&mut params, |_| true);
    }
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let xv = tape.constant(x_tensor(test_x.iter())?);
    let z = linear(&mut tape, &bound, "probe", xv)?;
    let p = tape.sigmoid(z);
    let p = tape.value(p);
    Ok((0..p.rows()).map(|i| p.row(i).to_vec()).collect())
}
