use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use labelsynth::config::{RunConfig, SweepSpec, SweepVariable};
use labelsynth::data::{generate_planted, read_jsonl, write_jsonl, DatasetBundle, Instance};
use labelsynth::eval::downstream::{baseline_entropy_reg, examples, train_downstream};
use labelsynth::eval::experiment::{
    write_plot_data, write_report_csv, Experiment, ReportRow, Variant,
};
use labelsynth::generative::{JointPrior, LabelSampler, Model};
use labelsynth::graph::{build_graph, LabelGraph, RelatedClassSets};
use labelsynth::rng::{stream_rng, Stream};
use labelsynth::trainer::{Checkpoint, TrainData, Trainer};
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "labelsynth",
    version,
    about = "Generate labeled data for unseen target classes from inexact supervision"
)]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field by dotted path, e.g. `--set gen.alpha=0.5`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a planted dataset and write its splits.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the class graph from a dataset's labeled split.
    BuildGraph {
        #[arg(long)]
        data: PathBuf,
        /// Related-class sets as JSON; defaults to the dataset's own.
        #[arg(long)]
        relations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain and jointly train the generator.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample labeled instances from a trained generator.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Number of instances.
        #[arg(short = 'n', long = "n-samples", value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score downstream classifiers with and without synthetic data.
    Evaluate {
        #[command(flatten)]
        source: Source,
        /// Synthetic instances to add to the estimated-labeled set.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one variable over a grid and seeds.
    Sweep {
        #[command(flatten)]
        source: Source,
        /// size_of_Ds, size_of_Dl, alpha or beta; defaults to the config's sweeps.
        #[arg(long)]
        variable: Option<String>,
        /// Comma-separated grid; defaults to the variable's standard grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the full model with its two ablations.
    Ablate {
        #[command(flatten)]
        source: Source,
        /// Subset of full, independent-head, weighted-graph.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Source {
    /// Dataset directory; a planted dataset is drawn from the config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(labelsynth::Error),
}

impl From<labelsynth::Error> for Failure {
    fn from(e: labelsynth::Error) -> Self {
        if e.is_validation() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Run(e)
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let base = match &cli.config {
        Some(p) => {
            require(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let config = base.with_overrides(&cli.overrides)?;
    config.validate()?;
    Ok(config)
}

fn require(path: &Path) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("missing input: {}", path.display())))
    }
}

fn out_dir(out: &Option<PathBuf>, config: &RunConfig, name: &str) -> Outcome<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| config.output_dir.join(name));
    fs::create_dir_all(&dir).map_err(|e| {
        Failure::Run(labelsynth::Error::Io {
            path: dir.clone(),
            source: e,
        })
    })?;
    Ok(dir)
}

fn file_digest(path: &Path) -> Outcome<String> {
    let bytes = fs::read(path).map_err(|e| {
        Failure::Run(labelsynth::Error::Io {
            path: path.into(),
            source: e,
        })
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Records the config, its hash and a digest of every output next to the
/// outputs themselves.
fn write_manifest(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    outputs: &[PathBuf],
) -> Outcome<()> {
    let mut digests = BTreeMap::new();
    for p in outputs {
        let name = p.strip_prefix(dir).unwrap_or(p).display().to_string();
        digests.insert(name, file_digest(p)?);
    }
    let manifest = json!({
        "command": command,
        "config_hash": config.hash(),
        "seed": config.seed,
        "outputs": digests,
    });
    let path = dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| {
        Failure::Run(labelsynth::Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    config.save(&dir.join("config.json"))?;
    Ok(())
}

fn load_bundle(dir: &Path) -> Outcome<DatasetBundle> {
    require(&dir.join("meta.json"))?;
    Ok(DatasetBundle::load(dir)?)
}

fn load_graph(path: &Path) -> Outcome<LabelGraph> {
    require(path)?;
    Ok(LabelGraph::load(path)?)
}

fn experiment(source: &Source, config: RunConfig) -> Outcome<Experiment> {
    Ok(match &source.data {
        Some(dir) => Experiment::new(config, load_bundle(dir)?)?,
        None => Experiment::planted(config)?,
    })
}

fn report(dir: &Path, name: &str, rows: &[ReportRow]) -> Outcome<Vec<PathBuf>> {
    let csv = dir.join(format!("{name}.csv"));
    write_report_csv(&csv, rows)?;
    let mut written = vec![csv];
    written.extend(write_plot_data(&dir.join("plots"), rows)?);
    Ok(written)
}

fn run(cli: Cli) -> Outcome<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::SynthData { out } => {
            let dir = out_dir(out, &config, "data")?;
            let (bundle, _) = generate_planted(&config.data, config.seed)?;
            bundle.save(&dir)?;
            let files: Vec<PathBuf> = ["d_l", "d_u", "d_e", "test", "val"]
                .iter()
                .map(|s| dir.join(format!("{s}.jsonl")))
                .chain([dir.join("meta.json")])
                .collect();
            write_manifest(&dir, "synth-data", &config, &files)?;
            println!(
                "d_l {}  d_u {}  d_e {}  test {}  val {}  |S| {}  |T| {}  -> {}",
                bundle.d_l.len(),
                bundle.d_u.len(),
                bundle.d_e.len(),
                bundle.test.len(),
                bundle.val.len(),
                bundle.space().n_inexact(),
                bundle.space().n_target(),
                dir.display()
            );
        }
        Command::BuildGraph {
            data,
            relations,
            out,
        } => {
            let bundle = load_bundle(data)?;
            let relations = match relations {
                Some(p) => {
                    require(p)?;
                    RelatedClassSets::load(p)?
                }
                None => bundle.meta.relations.clone(),
            };
            let graph = build_graph(
                &bundle.labeled_pool()?,
                bundle.space(),
                &relations,
                config.graph_threshold,
            )?;
            let dir = out_dir(out, &config, "graph")?;
            let path = dir.join("graph.json");
            graph.save(&path)?;
            write_manifest(&dir, "build-graph", &config, std::slice::from_ref(&path))?;
            println!("{} classes -> {}", graph.n_nodes(), path.display());
        }
        Command::Train { data, graph, out } => {
            let bundle = load_bundle(data)?;
            let graph = load_graph(graph)?.aligned_to(bundle.space())?;
            let model = Model::new(
                config.gen.clone(),
                config.classifier.clone(),
                bundle.input_dim()?,
                &graph,
            )?;
            let train = config.train_for(config.seed);
            let data = TrainData::from_bundle(&bundle, &train)?;
            let trainer = Trainer::new(&model, &graph, train, data)?;
            let state = trainer.fit()?;
            let checkpoint = trainer.checkpoint(&state);
            let dir = out_dir(out, &config, "model")?;
            let ck = dir.join("checkpoint.json");
            let log = dir.join("log.csv");
            checkpoint.save(&ck)?;
            state.write_log_csv(&log)?;
            write_manifest(&dir, "train", &config, &[ck.clone(), log])?;
            println!(
                "{} joint epochs (best {}), checkpoint {} -> {}",
                state.log.len(),
                state.best_epoch,
                checkpoint.digest(),
                ck.display()
            );
        }
        Command::Generate {
            checkpoint,
            graph,
            n,
            out,
        } => {
            require(checkpoint)?;
            let ck = Checkpoint::load(checkpoint)?;
            let graph = load_graph(graph)?;
            let model = ck.model.build(&graph)?;
            let prior = JointPrior::new(ck.label_pool.clone(), &graph, model.gen.prior_clamp_eps)?;
            let mut rng = stream_rng(config.seed, Stream::Generation, "synthetic");
            let rows: Vec<Instance> = model
                .sample_labeled(
                    &ck.params,
                    *n as usize,
                    &prior,
                    &LabelSampler::Empirical,
                    &mut rng,
                )?
                .into_iter()
                .map(|s| Instance {
                    x: s.x,
                    y_s: Some(s.y_s),
                    y_t: Some(s.y_t),
                })
                .collect();
            let dir = out_dir(out, &config, "synthetic")?;
            let path = dir.join("synthetic.jsonl");
            write_jsonl(&path, &rows)?;
            write_manifest(&dir, "generate", &config, std::slice::from_ref(&path))?;
            println!("{} instances -> {}", rows.len(), path.display());
        }
        Command::Evaluate {
            source,
            synthetic,
            out,
        } => {
            let e = experiment(source, config.clone())?;
            let d_s = match synthetic {
                Some(p) => {
                    require(p)?;
                    examples(&read_jsonl::<Instance>(p)?)?
                }
                None => Vec::new(),
            };
            let cfg = &config.downstream;
            let n_s = d_s.len() as f64;
            let row = |variant: &str, value: f64, report| ReportRow {
                variant: variant.to_string(),
                variable: SweepVariable::SizeOfDs.name().to_string(),
                value,
                seed: config.seed,
                report,
            };
            let plain = train_downstream(e.d_e(), e.test(), &e.graph, cfg, config.seed, &e.hash)?;
            let d_u: Vec<Vec<f64>> = e.bundle.d_u.iter().map(|i| i.x.clone()).collect();
            let entropy =
                baseline_entropy_reg(e.d_e(), &d_u, e.test(), &e.graph, cfg, config.seed, &e.hash)?;
            let (_, augmented) = e.evaluate_augmented(&d_s, config.seed)?;
            let rows = vec![
                row("plain", 0.0, plain),
                row("entropy-reg", 0.0, entropy),
                row("augmented", n_s, augmented),
            ];
            let dir = out_dir(out, &config, "evaluate")?;
            let files = report(&dir, "evaluate", &rows)?;
            write_manifest(&dir, "evaluate", &config, &files)?;
            for r in &rows {
                println!(
                    "{:<12} |D_s| {:>6}  mAP {:.4}  AUC {:.4}",
                    r.variant, r.value, r.report.map, r.report.auc
                );
            }
        }
        Command::Sweep {
            source,
            variable,
            grid,
            out,
        } => {
            let specs = match variable {
                Some(v) => {
                    let v = SweepVariable::parse(v)?;
                    let grid = if grid.is_empty() {
                        v.default_grid()
                    } else {
                        grid.clone()
                    };
                    vec![SweepSpec {
                        variable: v,
                        grid,
                        seeds: config.experiment.seeds.clone(),
                    }]
                }
                None if config.sweeps.is_empty() => {
                    return Err(Failure::Usage(
                        "no sweep given: pass --variable or set `sweeps` in the config".into(),
                    ));
                }
                None => config.sweeps.clone(),
            };
            for s in &specs {
                s.validate()?;
            }
            let e = experiment(source, config.clone())?;
            let mut rows = Vec::new();
            for s in &specs {
                rows.extend(e.run_sweep(s)?);
            }
            let dir = out_dir(out, &config, "sweep")?;
            let files = report(&dir, "sweep", &rows)?;
            write_manifest(&dir, "sweep", &config, &files)?;
            println!("{} rows -> {}", rows.len(), files[0].display());
        }
        Command::Ablate {
            source,
            variants,
            out,
        } => {
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
                    .iter()
                    .map(|v| Variant::parse(v))
                    .collect::<labelsynth::Result<_>>()?
            };
            let e = experiment(source, config.clone())?;
            let rows = e.run_ablation(&variants, &config.experiment.seeds)?;
            let dir = out_dir(out, &config, "ablate")?;
            let files = report(&dir, "ablation", &rows)?;
            write_manifest(&dir, "ablate", &config, &files)?;
            for r in &rows {
                println!(
                    "{:<10} seed {:>3}  mAP {:.4}  AUC {:.4}",
                    r.variant, r.seed, r.report.map, r.report.auc
                );
            }
        }
    }
    Ok(())
}
