//! One JSON document configuring a whole run, its hash, and dotted-path
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::data::PlantedConfig;
use crate::error::{Error, Result};
use crate::eval::downstream::{DownstreamConfig, ProbeConfig};
use crate::generative::GenConfig;
use crate::parallel::Strategy;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    SizeOfDs,
    SizeOfDl,
    Alpha,
    Beta,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::SizeOfDs => "size_of_Ds",
            SweepVariable::SizeOfDl => "size_of_Dl",
            SweepVariable::Alpha => "alpha",
            SweepVariable::Beta => "beta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "size_of_Ds" | "size_of_ds" => Ok(SweepVariable::SizeOfDs),
            "size_of_Dl" | "size_of_dl" => Ok(SweepVariable::SizeOfDl),
            "alpha" => Ok(SweepVariable::Alpha),
            "beta" => Ok(SweepVariable::Beta),
            _ => Err(Error::Config(format!(
                "unknown sweep variable `{s}` (expected size_of_Ds, size_of_Dl, alpha or beta)"
            ))),
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepVariable::SizeOfDs => vec![0.0, 500.0, 1000.0, 2000.0],
            SweepVariable::SizeOfDl => vec![100.0, 250.0, 500.0, 1000.0],
            SweepVariable::Alpha => vec![0.01, 0.1, 1.0, 10.0],
            SweepVariable::Beta => vec![0.01, 0.1, 1.0, 10.0, 100.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn with_defaults(variable: SweepVariable, seeds: Vec<u64>) -> Self {
        SweepSpec {
            variable,
            grid: variable.default_grid(),
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config(format!(
                "{} sweep grid is empty",
                self.variable.name()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        for &v in &self.grid {
            let ok = match self.variable {
                SweepVariable::SizeOfDs => v >= 0.0 && v.fract() == 0.0,
                SweepVariable::SizeOfDl => v >= 1.0 && v.fract() == 0.0,
                SweepVariable::Alpha | SweepVariable::Beta => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::Config(format!(
                    "invalid {} grid value {v}",
                    self.variable.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Synthetic set size for evaluations that do not sweep it.
    pub n_synthetic: usize,
    /// Candidate synthetic set sizes; the best by validation mAP is used.
    pub ds_grid: Vec<usize>,
    pub strategy: Strategy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: (0..5).collect(),
            n_synthetic: 2000,
            ds_grid: vec![0, 500, 1000, 2000, 4000],
            strategy: Strategy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Data generation uses it directly; single runs use it as
    /// the training seed (overriding `train.seed`).
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: PlantedConfig,
    /// Optional threshold on conditional co-occurrence edges.
    pub graph_threshold: Option<f64>,
    pub gen: GenConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub downstream: DownstreamConfig,
    pub probe: ProbeConfig,
    pub experiment: ExperimentConfig,
    pub sweeps: Vec<SweepSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: PlantedConfig::default(),
            graph_threshold: None,
            gen: GenConfig::default(),
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            downstream: DownstreamConfig::default(),
            probe: ProbeConfig::default(),
            experiment: ExperimentConfig::default(),
            sweeps: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.gen.validate()?;
        self.train.validate()?;
        self.downstream.validate()?;
        if self.classifier.feature_dim == 0 {
            return Err(Error::Config(
                "classifier.feature_dim must be positive".into(),
            ));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        if self.experiment.ds_grid.is_empty() {
            return Err(Error::Config("experiment.ds_grid is empty".into()));
        }
        if let Some(t) = self.graph_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("graph_threshold must lie in [0, 1]".into()));
            }
        }
        for s in &self.sweeps {
            s.validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Training configuration for a run under `seed`.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Applies `path=value` overrides, where `path` is dot-separated and
    /// `value` is JSON (bare words are taken as strings).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{o}` is not of the form a.b=value"))
            })?;
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            for key in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::Config(format!("unknown config field `{path}`")))?;
            }
            *node = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("override rejected: {e}")))
    }
}
