//! Staged training: classifier pretraining, autoencoder pretraining with the
//! classifier frozen, then joint optimization with validation early stopping.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::generative::{
    GenConfig, JointPrior, LossBreakdown, Model, NoiseDraw, CLASSIFIER, DECODER, ENCODER,
};
use crate::graph::LabelGraph;
use crate::numeric::{Tape, Tensor};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub pretrain_classifier_epochs: usize,
    pub pretrain_autoencoder_epochs: usize,
    pub joint_epochs: usize,
    pub seed: u64,
    /// Joint epochs without validation improvement before stopping; 0 never
    /// stops early.
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    /// Permit the joint stage without running both pretraining stages.
    pub skip_pretraining: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoment,
            pretrain_classifier_epochs: 20,
            pretrain_autoencoder_epochs: 20,
            joint_epochs: 100,
            seed: 0,
            early_stop_patience: 10,
            val_fraction: 0.1,
            skip_pretraining: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a positive number".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Training inputs with the labeled set already split into train and
/// validation parts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub x_l: Vec<Vec<f64>>,
    pub y_s: Vec<Vec<u8>>,
    pub x_u: Vec<Vec<f64>>,
    pub val_x: Vec<Vec<f64>>,
    pub val_y_s: Vec<Vec<u8>>,
}

impl TrainData {
    /// Holds out `val_fraction` of `d_l` (at least one instance when there
    /// are two or more) under the training seed.
    pub fn from_bundle(bundle: &DatasetBundle, config: &TrainConfig) -> Result<Self> {
        let pool = bundle.labeled_pool()?;
        let x: Vec<Vec<f64>> = bundle.d_l.iter().map(|i| i.x.clone()).collect();
        let x_u = bundle.d_u.iter().map(|i| i.x.clone()).collect();
        Self::split(x, pool, x_u, config)
    }

    pub fn split(
        x: Vec<Vec<f64>>,
        y_s: Vec<Vec<u8>>,
        x_u: Vec<Vec<f64>>,
        config: &TrainConfig,
    ) -> Result<Self> {
        if x.len() != y_s.len() {
            return Err(Error::dim("labeled set", &[x.len()], &[y_s.len()]));
        }
        let n = x.len();
        let mut n_val = (n as f64 * config.val_fraction).round() as usize;
        if config.val_fraction > 0.0 && n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(
            config.seed,
            Stream::Training,
            "validation-split",
        ));
        let (val_idx, train_idx) = order.split_at(n_val);
        let pick_x = |idx: &[usize]| idx.iter().map(|&i| x[i].clone()).collect();
        let pick_y = |idx: &[usize]| idx.iter().map(|&i| y_s[i].clone()).collect();
        Ok(TrainData {
            x_l: pick_x(train_idx),
            y_s: pick_y(train_idx),
            x_u,
            val_x: pick_x(val_idx),
            val_y_s: pick_y(val_idx),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParamStore,
    pub best_params: ParamStore,
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
    pub classifier_pretrained: bool,
    pub autoencoder_pretrained: bool,
    /// Completed joint epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut state: TrainState = serde_json::from_str(&text)?;
        for store in [&mut state.params, &mut state.best_params] {
            for (_, t) in store.iter_mut() {
                t.set_requires_grad(true);
            }
        }
        Ok(state)
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(Error::Csv)?;
        w.write_record([
            "epoch",
            "recon",
            "kl_z",
            "kl_y",
            "l_cons",
            "l_c_s",
            "total",
            "val_total",
        ])?;
        for row in &self.log {
            let t = &row.train;
            w.write_record(&[
                row.epoch.to_string(),
                t.recon.to_string(),
                t.kl_z.to_string(),
                t.kl_y.to_string(),
                t.l_cons.to_string(),
                t.l_c_s.to_string(),
                t.total.to_string(),
                row.val_total.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Architecture needed to rebuild a [`Model`] around a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub gen: GenConfig,
    pub classifier: ClassifierConfig,
    pub input_dim: usize,
}

impl ModelSpec {
    pub fn of(model: &Model) -> Self {
        ModelSpec {
            gen: model.gen.clone(),
            classifier: model.classifier.config.clone(),
            input_dim: model.input_dim,
        }
    }

    pub fn build(&self, graph: &LabelGraph) -> Result<Model> {
        Model::new(
            self.gen.clone(),
            self.classifier.clone(),
            self.input_dim,
            graph,
        )
    }
}

/// A trained generator: architecture, parameters and the label pool used
/// for sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub params: ParamStore,
    pub label_pool: Vec<Vec<u8>>,
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ck: Checkpoint = serde_json::from_str(&text)?;
        for (_, t) in ck.params.iter_mut() {
            t.set_requires_grad(true);
        }
        Ok(ck)
    }
}

fn rows_tensor(rows: &[&Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut v = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::dim("batch rows", &[r.len()], &[d]));
        }
        v.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), d, v)
}

fn is_classifier(name: &str) -> bool {
    name.starts_with(&format!("{CLASSIFIER}/"))
}

fn is_generator(name: &str) -> bool {
    name.starts_with(&format!("{ENCODER}/")) || name.starts_with(&format!("{DECODER}/"))
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub config: TrainConfig,
    pub data: TrainData,
    pub prior: JointPrior,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        graph: &LabelGraph,
        config: TrainConfig,
        data: TrainData,
    ) -> Result<Self> {
        config.validate()?;
        let prior = JointPrior::new(data.y_s.clone(), graph, model.gen.prior_clamp_eps)?;
        Ok(Trainer {
            model,
            config,
            data,
            prior,
        })
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let params = self.model.init(self.config.seed)?;
        Ok(TrainState {
            best_params: params.clone(),
            params,
            optimizer: Optimizer::new(self.config.optimizer, self.config.lr),
            rng: stream_rng(self.config.seed, Stream::Training, "steps"),
            classifier_pretrained: false,
            autoencoder_pretrained: false,
            epoch: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            stopped_early: false,
            log: Vec::new(),
        })
    }

    fn steps_per_epoch(&self) -> usize {
        self.data.x_l.len().div_ceil(self.config.batch_size)
    }

    /// Labeled batch indices for every step of one epoch: a fresh
    /// permutation cut into batches (wrapping to fill the last one), or
    /// draws with replacement when the set is smaller than a batch.
    fn labeled_batches(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let n = self.data.x_l.len();
        let b = self.config.batch_size;
        let steps = self.steps_per_epoch();
        if n < b {
            return (0..steps)
                .map(|_| (0..b).map(|_| rng.gen_range(0..n)).collect())
                .collect();
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        (0..steps)
            .map(|k| (0..b).map(|i| perm[(k * b + i) % n]).collect())
            .collect()
    }

    fn unlabeled_batch(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.data.x_u.len();
        let b = self.config.batch_size;
        if n >= b {
            sample(rng, n, b).into_vec()
        } else {
            (0..b).map(|_| rng.gen_range(0..n)).collect()
        }
    }

    fn labeled_tensors(&self, idx: &[usize]) -> Result<(Tensor, Vec<Vec<u8>>)> {
        let rows: Vec<&Vec<f64>> = idx.iter().map(|&i| &self.data.x_l[i]).collect();
        let ys = idx.iter().map(|&i| self.data.y_s[i].clone()).collect();
        Ok((rows_tensor(&rows)?, ys))
    }

    fn unlabeled_tensor(&self, idx: &[usize]) -> Result<Tensor> {
        let rows: Vec<&Vec<f64>> = idx.iter().map(|&i| &self.data.x_u[i]).collect();
        rows_tensor(&rows)
    }

    fn require_labeled(&self) -> Result<()> {
        if self.data.x_l.is_empty() {
            return Err(Error::Empty("labeled training set"));
        }
        Ok(())
    }

    fn require_unlabeled(&self) -> Result<()> {
        if self.data.x_u.is_empty() {
            return Err(Error::Empty("unlabeled training set"));
        }
        Ok(())
    }

    /// Fits the classifier on `β·L_C^s` plus the labeled target KL; encoder
    /// and decoder are untouched.
    pub fn pretrain_classifier(&self, state: &mut TrainState) -> Result<()> {
        self.require_labeled()?;
        state.optimizer = Optimizer::new(self.config.optimizer, self.config.lr);
        for epoch in 0..self.config.pretrain_classifier_epochs {
            let mut sum = 0.0;
            let batches = self.labeled_batches(&mut state.rng);
            for idx in &batches {
                let (x, ys) = self.labeled_tensors(idx)?;
                let mut tape = Tape::new();
                let bound = state
                    .params
                    .subset(&format!("{CLASSIFIER}/"))
                    .bind(&mut tape);
                let loss =
                    self.model
                        .classifier_pretrain_loss(&mut tape, &bound, &x, &ys, &self.prior)?;
                sum += tape.value(loss).item()?;
                tape.backward(loss)?;
                state.params.accumulate_grads(&tape, &bound)?;
                state.optimizer.step(&mut state.params, is_classifier);
            }
            log::debug!(
                "classifier pretraining epoch {}: loss {:.4}",
                epoch + 1,
                sum / batches.len() as f64
            );
        }
        state.classifier_pretrained = true;
        Ok(())
    }

    /// Fits encoder and decoder on the full objective with the classifier
    /// frozen.
    pub fn pretrain_autoencoder(&self, state: &mut TrainState) -> Result<()> {
        self.require_labeled()?;
        self.require_unlabeled()?;
        state.optimizer = Optimizer::new(self.config.optimizer, self.config.lr);
        for epoch in 0..self.config.pretrain_autoencoder_epochs {
            let mean = self.run_epoch(state, is_generator)?;
            log::debug!(
                "autoencoder pretraining epoch {}: recon {:.4} total {:.4}",
                epoch + 1,
                mean.recon,
                mean.total
            );
        }
        state.autoencoder_pretrained = true;
        Ok(())
    }

    /// One step on a paired batch; returns the step's loss breakdown.
    pub fn step(
        &self,
        state: &mut TrainState,
        l_idx: &[usize],
        u_idx: &[usize],
        trainable: fn(&str) -> bool,
    ) -> Result<LossBreakdown> {
        let (x_l, ys) = self.labeled_tensors(l_idx)?;
        let x_u = self.unlabeled_tensor(u_idx)?;
        let noise = NoiseDraw::draw(
            &mut state.rng,
            l_idx.len(),
            u_idx.len(),
            self.model.gen.latent_dim,
            &self.prior,
            self.model.gen.constraint_label_source,
        )?;
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape);
        let lv = self
            .model
            .total_loss(&mut tape, &bound, &x_l, &ys, &x_u, &self.prior, &noise)?;
        let out = lv.breakdown(&tape)?;
        if !out.total.is_finite() {
            return Err(Error::Domain(format!(
                "training loss became non-finite at joint epoch {}",
                state.epoch
            )));
        }
        tape.backward(lv.total)?;
        state.params.accumulate_grads(&tape, &bound)?;
        state.optimizer.step(&mut state.params, trainable);
        Ok(out)
    }

    fn run_epoch(
        &self,
        state: &mut TrainState,
        trainable: fn(&str) -> bool,
    ) -> Result<LossBreakdown> {
        let batches = self.labeled_batches(&mut state.rng);
        let mut acc = LossBreakdown::default();
        for l_idx in &batches {
            let u_idx = self.unlabeled_batch(&mut state.rng);
            let b = self.step(state, l_idx, &u_idx, trainable)?;
            acc.recon += b.recon;
            acc.kl_z += b.kl_z;
            acc.kl_y += b.kl_y;
            acc.l_cons += b.l_cons;
            acc.l_c_s += b.l_c_s;
            acc.total += b.total;
        }
        let k = batches.len() as f64;
        Ok(LossBreakdown {
            recon: acc.recon / k,
            kl_z: acc.kl_z / k,
            kl_y: acc.kl_y / k,
            l_cons: acc.l_cons / k,
            l_c_s: acc.l_c_s / k,
            total: acc.total / k,
        })
    }

    /// Total loss on the held-out labeled instances, which also stand in for
    /// the unlabeled batch. Noise comes from a fixed stream so epochs are
    /// compared on equal terms.
    pub fn validation_loss(&self, params: &ParamStore) -> Result<f64> {
        let (x, ys): (Vec<&Vec<f64>>, &[Vec<u8>]) = if self.data.val_x.is_empty() {
            (self.data.x_l.iter().collect(), &self.data.y_s)
        } else {
            (self.data.val_x.iter().collect(), &self.data.val_y_s)
        };
        let x = rows_tensor(&x)?;
        let n = x.rows();
        let mut rng = stream_rng(self.config.seed, Stream::Training, "validation-noise");
        let noise = NoiseDraw::draw(
            &mut rng,
            n,
            n,
            self.model.gen.latent_dim,
            &self.prior,
            self.model.gen.constraint_label_source,
        )?;
        let mut tape = Tape::new();
        let bound = params.bind_constant(&mut tape);
        let lv = self
            .model
            .total_loss(&mut tape, &bound, &x, ys, &x, &self.prior, &noise)?;
        tape.value(lv.total).item()
    }

    /// One joint epoch with validation and early-stopping bookkeeping.
    pub fn joint_epoch(&self, state: &mut TrainState) -> Result<EpochLog> {
        let train = self.run_epoch(state, |_| true)?;
        state.epoch += 1;
        let val_total = self.validation_loss(&state.params)?;
        if val_total < state.best_val {
            state.best_val = val_total;
            state.best_epoch = state.epoch;
            state.best_params = state.params.clone();
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
        }
        let row = EpochLog {
            epoch: state.epoch,
            train,
            val_total,
        };
        log::info!(
            "epoch {}: total {:.4} recon {:.4} l_cons {:.4} val {:.4}",
            row.epoch,
            train.total,
            train.recon,
            train.l_cons,
            val_total
        );
        state.log.push(row.clone());
        Ok(row)
    }

    /// Joint optimization from the state's current epoch until the epoch
    /// budget or early stop.
    pub fn train_joint(&self, state: &mut TrainState) -> Result<()> {
        if !self.config.skip_pretraining
            && !(state.classifier_pretrained && state.autoencoder_pretrained)
        {
            return Err(Error::Config(
                "joint training requires both pretraining stages (or skip_pretraining = true)"
                    .into(),
            ));
        }
        self.require_labeled()?;
        self.require_unlabeled()?;
        if state.epoch == 0 {
            state.optimizer = Optimizer::new(self.config.optimizer, self.config.lr);
        }
        while state.epoch < self.config.joint_epochs && !state.stopped_early {
            self.joint_epoch(state)?;
            let patience = self.config.early_stop_patience;
            if patience > 0 && state.epochs_since_best >= patience {
                state.stopped_early = true;
                log::info!(
                    "early stop after epoch {} (best epoch {})",
                    state.epoch,
                    state.best_epoch
                );
            }
        }
        Ok(())
    }

    /// All three stages from a fresh initialization.
    pub fn fit(&self) -> Result<TrainState> {
        let mut state = self.init_state()?;
        if !self.config.skip_pretraining {
            self.pretrain_classifier(&mut state)?;
            self.pretrain_autoencoder(&mut state)?;
        }
        self.train_joint(&mut state)?;
        Ok(state)
    }

    /// Best-validation parameters packaged for sampling.
    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        let params = if state.log.is_empty() {
            state.params.clone()
        } else {
            state.best_params.clone()
        };
        Checkpoint {
            model: ModelSpec::of(self.model),
            params,
            label_pool: self.prior.pool.clone(),
        }
    }
}
