//! Planted multi-label data with a known label joint, the estimated-labeled
//! set, and dataset files.
//!
//! Inexact labels are drawn in index order: class `i` turns on with
//! `implied_rate` when any of its parents is on, else with `base_rate`.
//! Each target is the OR of its designated inexact parents, flipped with
//! probability `flip_rate`. Instances are `x = Σ_i y_i μ_i + noise · η`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, LabelGraph, LabelSpace, RelatedClassSets, TargetRule};
use crate::rng::{stream_rng, Stream};

/// Enumeration of the label joint is limited to this many inexact classes.
pub const MAX_ENUMERATED_CLASSES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub n_inexact: usize,
    pub n_target: usize,
    pub input_dim: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// Fully labeled held-out split used only for model selection.
    pub n_val: usize,
    pub noise_scale: f64,
    pub base_rate: f64,
    pub implied_rate: f64,
    /// `(parent, child)` pairs over inexact indices with `parent < child`.
    pub dependencies: Vec<(usize, usize)>,
    /// Inexact parents of each target class.
    pub target_parents: Vec<Vec<usize>>,
    pub flip_rate: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_inexact: 8,
            n_target: 2,
            input_dim: 32,
            n_labeled: 500,
            n_unlabeled: 3000,
            n_test: 2000,
            n_val: 500,
            noise_scale: 0.5,
            base_rate: 0.2,
            implied_rate: 0.6,
            dependencies: vec![(0, 1), (2, 3), (4, 5), (1, 6)],
            target_parents: vec![vec![0, 2], vec![4, 7]],
            flip_rate: 0.1,
        }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_inexact == 0 {
            return bad("planted data needs at least one inexact class (n_inexact = 0)".into());
        }
        if self.n_inexact > MAX_ENUMERATED_CLASSES {
            return bad(format!(
                "n_inexact = {} exceeds the supported maximum of {MAX_ENUMERATED_CLASSES}",
                self.n_inexact
            ));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.n_labeled == 0 || self.n_unlabeled == 0 || self.n_test == 0 {
            return bad("n_labeled, n_unlabeled and n_test must be positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be a non-negative number".into());
        }
        for (name, p) in [
            ("base_rate", self.base_rate),
            ("implied_rate", self.implied_rate),
            ("flip_rate", self.flip_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for &(p, c) in &self.dependencies {
            if p >= c || c >= self.n_inexact {
                return bad(format!(
                    "dependency ({p}, {c}) must satisfy parent < child < n_inexact"
                ));
            }
        }
        if self.target_parents.len() != self.n_target {
            return bad(format!(
                "target_parents lists {} targets but n_target = {}",
                self.target_parents.len(),
                self.n_target
            ));
        }
        for ps in &self.target_parents {
            if ps.iter().any(|&p| p >= self.n_inexact) {
                return bad("target parent index out of range".into());
            }
        }
        Ok(())
    }

    pub fn space(&self) -> Result<LabelSpace> {
        LabelSpace::new(
            (0..self.n_inexact).map(|i| format!("s{i}")).collect(),
            (0..self.n_target).map(|i| format!("t{i}")).collect(),
        )
    }

    pub fn relations(&self) -> Result<RelatedClassSets> {
        let space = self.space()?;
        let mut rel = RelatedClassSets::new();
        for (t, ps) in self.target_parents.iter().enumerate() {
            for &p in ps {
                rel.relate(&space.target_classes[t], &space.inexact_classes[p]);
            }
        }
        Ok(rel)
    }

    fn parents_of(&self, child: usize) -> Vec<usize> {
        self.dependencies
            .iter()
            .filter(|&&(_, c)| c == child)
            .map(|&(p, _)| p)
            .collect()
    }

    fn rate(&self, y: &[u8], i: usize) -> f64 {
        if self.parents_of(i).iter().any(|&p| y[p] == 1) {
            self.implied_rate
        } else {
            self.base_rate
        }
    }

    fn or_of_parents(&self, y_s: &[u8], t: usize) -> bool {
        self.target_parents[t].iter().any(|&p| y_s[p] == 1)
    }
}

/// Generative ground truth of a planted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub config: PlantedConfig,
    /// One prototype per class in `W`, `|W| × d_x`.
    pub prototypes: Vec<Vec<f64>>,
}

impl PlantedModel {
    pub fn new<R: Rng>(config: PlantedConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.n_inexact + config.n_target;
        let prototypes = (0..w)
            .map(|_| {
                (0..config.input_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(PlantedModel { config, prototypes })
    }

    pub fn sample_labels<R: Rng>(&self, rng: &mut R) -> (Vec<u8>, Vec<u8>) {
        let c = &self.config;
        let mut y_s = vec![0u8; c.n_inexact];
        for i in 0..c.n_inexact {
            y_s[i] = u8::from(rng.gen_bool(c.rate(&y_s, i)));
        }
        let y_t = (0..c.n_target)
            .map(|t| u8::from(c.or_of_parents(&y_s, t) ^ rng.gen_bool(c.flip_rate)))
            .collect();
        (y_s, y_t)
    }

    /// Noise-free instance for a full label vector over `W`.
    pub fn mean_instance(&self, y: &[u8]) -> Vec<f64> {
        let mut x = vec![0.0; self.config.input_dim];
        for (mu, _) in self.prototypes.iter().zip(y).filter(|(_, &b)| b == 1) {
            for (xi, m) in x.iter_mut().zip(mu) {
                *xi += m;
            }
        }
        x
    }

    pub fn sample_instance<R: Rng>(&self, rng: &mut R) -> Instance {
        let (y_s, y_t) = self.sample_labels(rng);
        let mut y = y_s.clone();
        y.extend(&y_t);
        let mut x = self.mean_instance(&y);
        for xi in &mut x {
            *xi += self.config.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        Instance {
            x,
            y_s: Some(y_s),
            y_t: Some(y_t),
        }
    }

    /// Exact probability of every inexact label vector, indexed by the
    /// vector read as a little-endian bit pattern.
    pub fn inexact_joint(&self) -> Vec<f64> {
        let s = self.config.n_inexact;
        (0..1usize << s)
            .map(|bits| {
                let y: Vec<u8> = (0..s).map(|i| ((bits >> i) & 1) as u8).collect();
                (0..s)
                    .map(|i| {
                        let r = self.config.rate(&y, i);
                        if y[i] == 1 {
                            r
                        } else {
                            1.0 - r
                        }
                    })
                    .product()
            })
            .collect()
    }

    /// Exact pairwise table `P(l_i = 1, l_j = 1)` over `W`.
    pub fn pair_table(&self) -> Vec<Vec<f64>> {
        let c = &self.config;
        let s = c.n_inexact;
        let w = s + c.n_target;
        let mut table = vec![vec![0.0; w]; w];
        for (bits, p) in self.inexact_joint().into_iter().enumerate() {
            let y: Vec<u8> = (0..s).map(|i| ((bits >> i) & 1) as u8).collect();
            // Probability each class is on given this inexact vector.
            let on: Vec<f64> = (0..w)
                .map(|k| {
                    if k < s {
                        f64::from(y[k])
                    } else if c.or_of_parents(&y, k - s) {
                        1.0 - c.flip_rate
                    } else {
                        c.flip_rate
                    }
                })
                .collect();
            for i in 0..w {
                for j in 0..w {
                    // Targets are conditionally independent given y_s.
                    let pij = if i == j { on[i] } else { on[i] * on[j] };
                    table[i][j] += p * pij;
                }
            }
        }
        table
    }

    pub fn marginals(&self) -> Vec<f64> {
        let t = self.pair_table();
        (0..t.len()).map(|i| t[i][i]).collect()
    }

    /// Exact `P(l_i | l_j)` over `W`, 0 where `P(l_j) = 0`.
    pub fn conditional(&self) -> Vec<Vec<f64>> {
        let t = self.pair_table();
        let w = t.len();
        (0..w)
            .map(|i| {
                (0..w)
                    .map(|j| {
                        if t[j][j] > 0.0 {
                            t[i][j] / t[j][j]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_s: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_t: Option<Vec<u8>>,
}

impl Instance {
    pub fn unlabeled(x: Vec<f64>) -> Self {
        Instance {
            x,
            y_s: None,
            y_t: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub space: LabelSpace,
    pub relations: RelatedClassSets,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedModel>,
    /// Ground-truth targets of `d_l`, hidden from training; only the
    /// weighted-graph ablation reads them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_l_targets: Option<Vec<Vec<u8>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub d_l: Vec<Instance>,
    pub d_u: Vec<Instance>,
    pub d_e: Vec<Instance>,
    pub test: Vec<Instance>,
    pub val: Vec<Instance>,
}

const SPLITS: [&str; 5] = ["d_l", "d_u", "d_e", "test", "val"];

impl DatasetBundle {
    pub fn space(&self) -> &LabelSpace {
        &self.meta.space
    }

    pub fn input_dim(&self) -> Result<usize> {
        self.d_l
            .first()
            .or_else(|| self.d_u.first())
            .map(|i| i.x.len())
            .ok_or(Error::Empty("dataset"))
    }

    /// Inexact label vectors of `d_l`.
    pub fn labeled_pool(&self) -> Result<Vec<Vec<u8>>> {
        self.d_l
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                inst.y_s
                    .clone()
                    .ok_or_else(|| Error::Argument(format!("d_l instance {i} has no y_s")))
            })
            .collect()
    }

    /// `(y_s, true y_t)` for `d_l`, available only on planted data.
    pub fn whole_labels(&self) -> Result<Vec<(Vec<u8>, Option<Vec<u8>>)>> {
        let targets = self.meta.d_l_targets.as_ref().ok_or_else(|| {
            Error::Argument("ground-truth target labels are not available for this dataset".into())
        })?;
        Ok(self
            .labeled_pool()?
            .into_iter()
            .zip(targets.iter().cloned().map(Some))
            .collect())
    }

    fn split(&self, name: &str) -> &[Instance] {
        match name {
            "d_l" => &self.d_l,
            "d_u" => &self.d_u,
            "d_e" => &self.d_e,
            "test" => &self.test,
            _ => &self.val,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in SPLITS {
            write_jsonl(&dir.join(format!("{name}.jsonl")), self.split(name))?;
        }
        let meta = dir.join("meta.json");
        fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        meta.space.validate()?;
        let read = |name: &str| read_jsonl(&dir.join(format!("{name}.jsonl")));
        let bundle = DatasetBundle {
            meta,
            d_l: read("d_l")?,
            d_u: read("d_u")?,
            d_e: read("d_e")?,
            test: read("test")?,
            val: read("val")?,
        };
        bundle.check_shapes()?;
        Ok(bundle)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let s = self.meta.space.n_inexact();
        let t = self.meta.space.n_target();
        let d = self.input_dim()?;
        for name in SPLITS {
            for (i, inst) in self.split(name).iter().enumerate() {
                let ok = inst.x.len() == d
                    && inst
                        .y_s
                        .as_ref()
                        .is_none_or(|y| y.len() == s && y.iter().all(|&b| b <= 1))
                    && inst
                        .y_t
                        .as_ref()
                        .is_none_or(|y| y.len() == t && y.iter().all(|&b| b <= 1));
                if !ok {
                    return Err(Error::Argument(format!(
                        "{name} instance {} does not match the label space or input width",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sha-256 over the serialized splits and metadata.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.meta)?);
        for name in SPLITS {
            for inst in self.split(name) {
                h.update(serde_json::to_string(inst)?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads JSON lines; blank lines are skipped and parse failures report the
/// 1-based line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// `d_l` with each instance's targets estimated by the graph's OR rule.
pub fn build_estimated_labeled(d_l: &[Instance], graph: &LabelGraph) -> Result<Vec<Instance>> {
    let rule = TargetRule::from_graph(graph);
    let s = graph.space.n_inexact();
    d_l.iter()
        .enumerate()
        .map(|(i, inst)| {
            let y_s = inst
                .y_s
                .clone()
                .ok_or_else(|| Error::Argument(format!("d_l instance {i} has no y_s")))?;
            if y_s.len() != s {
                return Err(Error::dim("build_estimated_labeled", &[y_s.len()], &[s]));
            }
            let y_t = rule.apply(&y_s);
            Ok(Instance {
                x: inst.x.clone(),
                y_s: Some(y_s),
                y_t: Some(y_t),
            })
        })
        .collect()
}

/// Draws one planted corpus and splits it into `d_l`, `d_u`, `test` and
/// `val` in that order. Also returns the graph built from the full ground
/// truth with the true related-class sets.
pub fn generate_planted(config: &PlantedConfig, seed: u64) -> Result<(DatasetBundle, LabelGraph)> {
    config.validate()?;
    let model = PlantedModel::new(
        config.clone(),
        &mut stream_rng(seed, Stream::Data, "prototypes"),
    )?;
    let mut rng = stream_rng(seed, Stream::Data, "instances");
    let total = config.n_labeled + config.n_unlabeled + config.n_test + config.n_val;
    let all: Vec<Instance> = (0..total)
        .map(|_| model.sample_instance(&mut rng))
        .collect();

    let space = config.space()?;
    let relations = config.relations()?;
    let truth: Vec<&[u8]> = all
        .iter()
        .map(|i| i.y_s.as_deref().unwrap_or(&[]))
        .collect();
    let truth_graph = build_graph(&truth, &space, &relations, None)?;

    let (labeled, rest) = all.split_at(config.n_labeled);
    let (unlabeled, rest) = rest.split_at(config.n_unlabeled);
    let (test, val) = rest.split_at(config.n_test);

    let d_l: Vec<Instance> = labeled
        .iter()
        .map(|i| Instance {
            x: i.x.clone(),
            y_s: i.y_s.clone(),
            y_t: None,
        })
        .collect();
    let d_l_targets = labeled
        .iter()
        .map(|i| i.y_t.clone().unwrap_or_default())
        .collect();
    let d_u = unlabeled
        .iter()
        .map(|i| Instance::unlabeled(i.x.clone()))
        .collect();
    let d_e = build_estimated_labeled(&d_l, &truth_graph)?;

    let bundle = DatasetBundle {
        meta: DatasetMeta {
            space,
            relations,
            planted: Some(model),
            d_l_targets: Some(d_l_targets),
        },
        d_l,
        d_u,
        d_e,
        test: test.to_vec(),
        val: val.to_vec(),
    };
    Ok((bundle, truth_graph))
}
