//! End-to-end experiments on one dataset: generator training per variant,
//! synthetic augmentation, ablations, sweeps and the latent probe.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierKind;
use crate::config::{RunConfig, SweepSpec, SweepVariable};
use crate::data::{generate_planted, DatasetBundle};
use crate::error::{Error, Result};
use crate::eval::downstream::{examples, fit_downstream, linear_probe, Example};
use crate::eval::metrics::{roc_auc, MetricReport};
use crate::generative::{GenConfig, JointPrior, LabelSampler, Model};
use crate::graph::{build_graph, weighted_full_graph, LabelGraph};
use crate::numeric::Tensor;
use crate::rng::{stream_rng, Stream};
use crate::trainer::{Checkpoint, TrainData, TrainState, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Independent per-class head in place of the GCN classifier.
    IndependentHead,
    /// Weighted co-occurrence graph over all classes from ground truth.
    WeightedGraph,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Full,
        Variant::IndependentHead,
        Variant::WeightedGraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::IndependentHead => "independent-head",
            Variant::WeightedGraph => "weighted-graph",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (full, independent-head, weighted-graph)"
                ))
            })
    }
}

/// A trained generator with what is needed to sample from it.
#[derive(Clone, Debug)]
pub struct Generator {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub prior: JointPrior,
    pub state: TrainState,
}

impl Generator {
    /// `n` synthetic examples; smaller `n` under the same seed is a prefix.
    pub fn synthesize(&self, n: usize, seed: u64) -> Result<Vec<Example>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = stream_rng(seed, Stream::Generation, "synthetic");
        Ok(self
            .model
            .sample_labeled(
                &self.checkpoint.params,
                n,
                &self.prior,
                &LabelSampler::Empirical,
                &mut rng,
            )?
            .into_iter()
            .map(Example::from)
            .collect())
    }
}

/// One line of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub variable: String,
    pub value: f64,
    pub seed: u64,
    pub report: MetricReport,
}

/// Outcome of choosing the synthetic set size on validation data.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub seed: u64,
    pub chosen: usize,
    /// Test metrics at every grid size; validation mAP alongside.
    pub points: Vec<(usize, f64, MetricReport)>,
}

impl Selection {
    pub fn test_at(&self, n: usize) -> Option<&MetricReport> {
        self.points.iter().find(|p| p.0 == n).map(|p| &p.2)
    }

    pub fn chosen_report(&self) -> &MetricReport {
        self.test_at(self.chosen)
            .expect("chosen size is a grid point")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub seed: u64,
    /// Macro AUC over inexact classes of a linear probe on the latent mean.
    pub probe_auc: f64,
    /// Macro AUC over inexact classes of the generator's classifier.
    pub classifier_auc: f64,
}

fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<u8>], n: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut k = 0;
    for c in 0..n {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[c]).collect();
        if let Some(a) = roc_auc(&s, &l)? {
            sum += a;
            k += 1;
        }
    }
    if k == 0 {
        return Err(Error::Empty("classes with defined AUC"));
    }
    Ok(sum / k as f64)
}

pub struct Experiment {
    pub config: RunConfig,
    pub bundle: DatasetBundle,
    /// Binary graph estimated from `d_l` and the declared relations.
    pub graph: LabelGraph,
    pub hash: String,
    d_e: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
}

impl Experiment {
    pub fn new(config: RunConfig, bundle: DatasetBundle) -> Result<Self> {
        config.validate()?;
        bundle.check_shapes()?;
        let graph = build_graph(
            &bundle.labeled_pool()?,
            bundle.space(),
            &bundle.meta.relations,
            config.graph_threshold,
        )?;
        let d_e = examples(&bundle.d_e)?;
        let val = examples(&bundle.val)?;
        let test = examples(&bundle.test)?;
        if test.is_empty() {
            return Err(Error::Empty("test split"));
        }
        Ok(Experiment {
            hash: config.hash(),
            config,
            bundle,
            graph,
            d_e,
            val,
            test,
        })
    }

    /// Planted bundle from the config's data section and root seed.
    pub fn planted(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (bundle, _) = generate_planted(&config.data, config.seed)?;
        Self::new(config, bundle)
    }

    pub fn d_e(&self) -> &[Example] {
        &self.d_e
    }

    pub fn test(&self) -> &[Example] {
        &self.test
    }

    pub fn val(&self) -> &[Example] {
        &self.val
    }

    /// Graph the variant's classifier sees.
    fn model_graph(&self, variant: Variant) -> Result<LabelGraph> {
        match variant {
            Variant::Full | Variant::IndependentHead => Ok(self.graph.clone()),
            Variant::WeightedGraph => {
                weighted_full_graph(&self.bundle.whole_labels()?, self.bundle.space())
            }
        }
    }

    pub fn train_generator(
        &self,
        variant: Variant,
        gen: &GenConfig,
        seed: u64,
    ) -> Result<Generator> {
        let mut cls = self.config.classifier.clone();
        if variant == Variant::IndependentHead {
            cls.kind = ClassifierKind::Independent;
        }
        let model = Model::new(
            gen.clone(),
            cls,
            self.bundle.input_dim()?,
            &self.model_graph(variant)?,
        )?;
        let train = self.config.train_for(seed);
        let data = TrainData::from_bundle(&self.bundle, &train)?;
        let trainer = Trainer::new(&model, &self.graph, train, data)?;
        let state = trainer.fit()?;
        let checkpoint = trainer.checkpoint(&state);
        let prior = trainer.prior.clone();
        Ok(Generator {
            model,
            checkpoint,
            prior,
            state,
        })
    }

    fn augmented(&self, d_s: &[Example]) -> Vec<Example> {
        self.d_e.iter().chain(d_s).cloned().collect()
    }

    /// Downstream classifier on `d_e ∪ d_s`, scored on validation and test.
    pub fn evaluate_augmented(
        &self,
        d_s: &[Example],
        seed: u64,
    ) -> Result<(Option<MetricReport>, MetricReport)> {
        let cfg = &self.config.downstream;
        let fitted = fit_downstream(&self.augmented(d_s), None, &self.graph, cfg, seed)?;
        let val = if self.val.is_empty() {
            None
        } else {
            Some(fitted.evaluate(&self.val, &self.graph, cfg.report_inexact, seed, &self.hash)?)
        };
        let test = fitted.evaluate(
            &self.test,
            &self.graph,
            cfg.report_inexact,
            seed,
            &self.hash,
        )?;
        Ok((val, test))
    }

    /// Evaluates every size in `grid` and picks the one with the best
    /// validation mAP (the smallest on ties).
    pub fn select_synthetic_size(
        &self,
        generator: &Generator,
        grid: &[usize],
        seed: u64,
    ) -> Result<Selection> {
        if grid.is_empty() {
            return Err(Error::Config("synthetic size grid is empty".into()));
        }
        if self.val.is_empty() {
            return Err(Error::Empty(
                "validation split for synthetic size selection",
            ));
        }
        let max = grid.iter().copied().max().unwrap_or(0);
        let pool = generator.synthesize(max, seed)?;
        let mut points = Vec::with_capacity(grid.len());
        for &n in grid {
            let (val, test) = self.evaluate_augmented(&pool[..n], seed)?;
            let v = val.map(|r| r.map).unwrap_or(f64::NAN);
            log::info!(
                "seed {seed}: |D_s| = {n}: val mAP {v:.4}, test mAP {:.4}",
                test.map
            );
            points.push((n, v, test));
        }
        let chosen = points
            .iter()
            .fold(None::<(usize, f64)>, |best, p| match best {
                Some((_, bv)) if bv >= p.1 => best,
                _ => Some((p.0, p.1)),
            })
            .map(|b| b.0)
            .unwrap_or(grid[0]);
        Ok(Selection {
            seed,
            chosen,
            points,
        })
    }

    /// Trains the variant's generator and evaluates `d_e ∪ d_s` with
    /// `n_synthetic` samples.
    pub fn run_variant(&self, variant: Variant, seed: u64) -> Result<MetricReport> {
        let g = self.train_generator(variant, &self.config.gen, seed)?;
        let d_s = g.synthesize(self.config.experiment.n_synthetic, seed)?;
        Ok(self.evaluate_augmented(&d_s, seed)?.1)
    }

    pub fn run_ablation(&self, variants: &[Variant], seeds: &[u64]) -> Result<Vec<ReportRow>> {
        let jobs: Vec<(Variant, u64)> = variants
            .iter()
            .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
            .collect();
        let n_s = self.config.experiment.n_synthetic as f64;
        self.config.experiment.strategy.try_map(&jobs, |&(v, s)| {
            Ok(ReportRow {
                variant: v.name().to_string(),
                variable: "size_of_Ds".to_string(),
                value: n_s,
                seed: s,
                report: self.run_variant(v, s)?,
            })
        })
    }

    fn sweep_point(&self, variable: SweepVariable, value: f64, seed: u64) -> Result<MetricReport> {
        let n_s = self.config.experiment.n_synthetic;
        match variable {
            SweepVariable::SizeOfDs => unreachable!("handled per seed"),
            SweepVariable::Alpha | SweepVariable::Beta => {
                let mut gen = self.config.gen.clone();
                if variable == SweepVariable::Alpha {
                    gen.alpha = value;
                } else {
                    gen.beta = value;
                }
                let g = self.train_generator(Variant::Full, &gen, seed)?;
                Ok(self.evaluate_augmented(&g.synthesize(n_s, seed)?, seed)?.1)
            }
            SweepVariable::SizeOfDl => {
                let planted = self.bundle.meta.planted.as_ref().ok_or_else(|| {
                    Error::Argument("the size_of_Dl sweep needs a planted dataset".into())
                })?;
                let mut config = self.config.clone();
                config.data = planted.config.clone();
                config.data.n_labeled = value as usize;
                let sub = Experiment::planted(config)?;
                sub.run_variant(Variant::Full, seed)
            }
        }
    }

    /// One pipeline run per (grid value, seed). For the synthetic-size
    /// sweep a single generator per seed serves every grid value.
    pub fn run_sweep(&self, spec: &SweepSpec) -> Result<Vec<ReportRow>> {
        spec.validate()?;
        let strategy = self.config.experiment.strategy;
        let name = spec.variable.name().to_string();
        let row = |value: f64, seed: u64, report: MetricReport| ReportRow {
            variant: Variant::Full.name().to_string(),
            variable: name.clone(),
            value,
            seed,
            report,
        };
        if spec.variable == SweepVariable::SizeOfDs {
            let per_seed = strategy.try_map(&spec.seeds, |&seed| {
                let g = self.train_generator(Variant::Full, &self.config.gen, seed)?;
                let max = spec.grid.iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
                let pool = g.synthesize(max, seed)?;
                spec.grid
                    .iter()
                    .map(|&v| {
                        Ok((
                            v,
                            seed,
                            self.evaluate_augmented(&pool[..v as usize], seed)?.1,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut by_key: BTreeMap<(usize, usize), ReportRow> = BTreeMap::new();
            for (si, rows) in per_seed.into_iter().enumerate() {
                for (vi, (v, seed, r)) in rows.into_iter().enumerate() {
                    by_key.insert((vi, si), row(v, seed, r));
                }
            }
            return Ok(by_key.into_values().collect());
        }
        let jobs: Vec<(f64, u64)> = spec
            .grid
            .iter()
            .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
            .collect();
        strategy.try_map(&jobs, |&(v, s)| {
            Ok(row(v, s, self.sweep_point(spec.variable, v, s)?))
        })
    }

    /// Linear probe from the encoder mean to the inexact labels, against the
    /// generator's own classifier, both scored on the test split.
    pub fn probe(&self, generator: &Generator, seed: u64) -> Result<ProbeResult> {
        let s = self.graph.space.n_inexact();
        let store = &generator.checkpoint.params;
        let rows = |xs: &[&Vec<f64>]| Tensor::from_rows(xs);
        let train_x: Vec<&Vec<f64>> = self.bundle.d_l.iter().map(|i| &i.x).collect();
        let train_y = self.bundle.labeled_pool()?;
        let test_x: Vec<&Vec<f64>> = self.test.iter().map(|e| &e.x).collect();
        let test_y: Vec<Vec<u8>> = self.test.iter().map(|e| e.y_s.clone()).collect();
        let to_rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
        let z_train = to_rows(&generator.model.encode(store, &rows(&train_x)?)?.mu_z);
        let z_test = to_rows(&generator.model.encode(store, &rows(&test_x)?)?.mu_z);
        let probe_scores = linear_probe(&z_train, &train_y, &z_test, &self.config.probe, seed)?;
        let cls =
            generator
                .model
                .classifier
                .predict(store, &generator.model.ctx, &rows(&test_x)?)?;
        let cls_scores: Vec<Vec<f64>> = (0..cls.rows()).map(|i| cls.row(i)[..s].to_vec()).collect();
        Ok(ProbeResult {
            seed,
            probe_auc: macro_auc(&probe_scores, &test_y, s)?,
            classifier_auc: macro_auc(&cls_scores, &test_y, s)?,
        })
    }
}

/// Tidy metrics table: one row per report, per-class columns for every
/// class present in any report.
pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut classes: Vec<String> = rows
        .iter()
        .flat_map(|r| {
            r.report
                .per_class_ap
                .keys()
                .chain(r.report.per_class_auc.keys())
        })
        .cloned()
        .collect();
    classes.sort();
    classes.dedup();
    let mut w = csv::Writer::from_path(path).map_err(Error::Csv)?;
    let mut header: Vec<String> = [
        "variant",
        "variable",
        "value",
        "seed",
        "map",
        "auc",
        "config_hash",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(classes.iter().map(|c| format!("ap_{c}")));
    header.extend(classes.iter().map(|c| format!("auc_{c}")));
    w.write_record(&header)?;
    let cell =
        |m: &BTreeMap<String, f64>, c: &String| m.get(c).map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.variant.clone(),
            r.variable.clone(),
            r.value.to_string(),
            r.seed.to_string(),
            r.report.map.to_string(),
            r.report.auc.to_string(),
            r.report.config_hash.clone(),
        ];
        rec.extend(classes.iter().map(|c| cell(&r.report.per_class_ap, c)));
        rec.extend(classes.iter().map(|c| cell(&r.report.per_class_auc, c)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seed-averaged curves, one two-column file (`value mean`) per variant,
/// variable and metric. Returns the paths written.
pub fn write_plot_data(dir: &Path, rows: &[ReportRow]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut curves: BTreeMap<(String, String), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in rows {
        curves
            .entry((r.variant.clone(), r.variable.clone()))
            .or_default()
            .push((r.value, r.report.map, r.report.auc));
    }
    let mut written = Vec::new();
    for ((variant, variable), pts) in curves {
        let mut by_value: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
        for (v, m, a) in pts {
            match by_value.iter_mut().find(|e| e.0 == v) {
                Some(e) => e.1.push((m, a)),
                None => by_value.push((v, vec![(m, a)])),
            }
        }
        by_value.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (metric, pick) in [("map", 0usize), ("auc", 1usize)] {
            let path = dir.join(format!("{variant}_{variable}_{metric}.txt"));
            let text: String = by_value
                .iter()
                .map(|(v, ms)| {
                    let mean = ms
                        .iter()
                        .map(|p| if pick == 0 { p.0 } else { p.1 })
                        .sum::<f64>()
                        / ms.len() as f64;
                    format!("{v} {mean}\n")
                })
                .collect();
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::data::PlantedConfig;
    use crate::eval::downstream::DownstreamConfig;
    use crate::trainer::TrainConfig;

    pub(crate) fn tiny() -> RunConfig {
        RunConfig {
            data: PlantedConfig {
                n_inexact: 4,
                n_target: 1,
                input_dim: 8,
                n_labeled: 40,
                n_unlabeled: 60,
                n_test: 60,
                n_val: 30,
                dependencies: vec![(0, 1)],
                target_parents: vec![vec![0, 2]],
                ..PlantedConfig::default()
            },
            gen: GenConfig {
                latent_dim: 2,
                encoder_hidden: vec![8],
                decoder_hidden: vec![8],
                ..GenConfig::default()
            },
            classifier: ClassifierConfig {
                extractor_hidden: vec![8],
                feature_dim: 4,
                gcn_hidden: vec![4],
                ..ClassifierConfig::default()
            },
            train: TrainConfig {
                batch_size: 16,
                pretrain_classifier_epochs: 1,
                pretrain_autoencoder_epochs: 1,
                joint_epochs: 2,
                ..TrainConfig::default()
            },
            downstream: DownstreamConfig {
                extractor_hidden: vec![8],
                feature_dim: 4,
                gcn_hidden: vec![4],
                steps: 20,
                batch_size: 16,
                ..DownstreamConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn ablation_produces_one_row_per_variant_and_seed() {
        let e = Experiment::planted(tiny()).unwrap();
        let rows = e.run_ablation(&Variant::ALL, &[0, 1]).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.report.map));
            assert!((0.0..=1.0).contains(&r.report.auc));
        }
        assert_eq!(rows, e.run_ablation(&Variant::ALL, &[0, 1]).unwrap());
    }

    #[test]
    fn weighted_variant_needs_ground_truth() {
        let mut e = Experiment::planted(tiny()).unwrap();
        e.bundle.meta.d_l_targets = None;
        assert!(e.run_variant(Variant::WeightedGraph, 0).is_err());
    }

    #[test]
    fn size_sweep_zero_point_is_the_plain_baseline() {
        let e = Experiment::planted(tiny()).unwrap();
        let spec = SweepSpec {
            variable: SweepVariable::SizeOfDs,
            grid: vec![0.0, 20.0, 40.0],
            seeds: vec![3, 4],
        };
        let rows = e.run_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 6);
        let zero = rows.iter().find(|r| r.value == 0.0 && r.seed == 3).unwrap();
        let plain = fit_downstream(e.d_e(), None, &e.graph, &e.config.downstream, 3)
            .unwrap()
            .evaluate(e.test(), &e.graph, false, 3, &e.hash)
            .unwrap();
        assert_eq!(zero.report, plain);

        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("sweep.csv");
        write_report_csv(&csv_path, &rows).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("variant,variable,value,seed,map,auc"));
        let files = write_plot_data(dir.path(), &rows).unwrap();
        assert_eq!(files.len(), 2);
        let curve = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(curve.lines().count(), 3);
        assert!(curve.lines().all(|l| l.split(' ').count() == 2));
    }

    #[test]
    fn hyperparameter_sweeps_have_grid_times_seeds_rows() {
        let e = Experiment::planted(tiny()).unwrap();
        for variable in [SweepVariable::Alpha, SweepVariable::SizeOfDl] {
            let spec = SweepSpec {
                variable,
                grid: vec![20.0, 30.0],
                seeds: vec![0],
            };
            let rows = e.run_sweep(&spec).unwrap();
            assert_eq!(rows.len(), 2);
            assert_eq!(rows[1].value, 30.0);
        }
    }

    #[test]
    fn selection_and_probe_run() {
        let e = Experiment::planted(tiny()).unwrap();
        let g = e.train_generator(Variant::Full, &e.config.gen, 0).unwrap();
        let sel = e.select_synthetic_size(&g, &[0, 10, 30], 0).unwrap();
        assert!([0, 10, 30].contains(&sel.chosen));
        assert_eq!(sel.points.len(), 3);
        let p = e.probe(&g, 0).unwrap();
        assert!((0.0..=1.0).contains(&p.probe_auc));
        assert!((0.0..=1.0).contains(&p.classifier_auc));
        let a = g.synthesize(30, 1).unwrap();
        let b = g.synthesize(10, 1).unwrap();
        assert_eq!(&a[..10], &b[..]);
    }
}
