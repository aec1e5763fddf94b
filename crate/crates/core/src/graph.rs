//! The class graph over inexact-supervision and target classes.
//!
//! Node order is always the inexact classes followed by the target classes.
//! The inexact block of the adjacency holds conditional co-occurrence
//! probabilities `P(l_i | l_j) = M_ij / N_j`; target classes are linked to
//! their related inexact classes with unit weight in both directions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub inexact_classes: Vec<String>,
    pub target_classes: Vec<String>,
}

impl LabelSpace {
    pub fn new(inexact: Vec<String>, target: Vec<String>) -> Result<Self> {
        let space = LabelSpace {
            inexact_classes: inexact,
            target_classes: target,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inexact_classes.is_empty() {
            return Err(Error::Config(
                "at least one inexact-supervision class is required".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for name in self.all_classes() {
            if !seen.insert(name) {
                return Err(Error::Config(format!(
                    "class `{name}` declared more than once (inexact and target sets must be disjoint)"
                )));
            }
        }
        Ok(())
    }

    pub fn n_inexact(&self) -> usize {
        self.inexact_classes.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_classes.len()
    }

    pub fn n_all(&self) -> usize {
        self.n_inexact() + self.n_target()
    }

    pub fn all_classes(&self) -> impl Iterator<Item = &String> {
        self.inexact_classes.iter().chain(&self.target_classes)
    }

    /// Position of a class in the combined order (inexact then target).
    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.all_classes()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn inexact_index(&self, name: &str) -> Result<usize> {
        self.inexact_classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn target_index(&self, name: &str) -> Result<usize> {
        self.target_classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }
}

/// Pairwise and single label counts over inexact classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    n: usize,
    pair: Vec<u64>,
    single: Vec<u64>,
}

impl CooccurrenceCounts {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn pair(&self, i: usize, j: usize) -> u64 {
        self.pair[i * self.n + j]
    }

    pub fn single(&self, j: usize) -> u64 {
        self.single[j]
    }
}

/// Counts label pairs over binary label vectors of width `width`.
pub fn count_cooccurrence<L: AsRef<[u8]>>(
    labels: &[L],
    width: usize,
) -> Result<CooccurrenceCounts> {
    if labels.is_empty() {
        return Err(Error::Empty("labeled set for co-occurrence counting"));
    }
    let mut pair = vec![0u64; width * width];
    let mut single = vec![0u64; width];
    let mut on = Vec::with_capacity(width);
    for (k, y) in labels.iter().enumerate() {
        let y = y.as_ref();
        if y.len() != width {
            return Err(Error::dim("count_cooccurrence", &[width], &[y.len()]));
        }
        on.clear();
        for (j, &v) in y.iter().enumerate() {
            match v {
                0 => {}
                1 => on.push(j),
                other => {
                    return Err(Error::Domain(format!(
                        "instance {k}: label entries must be 0 or 1, got {other}"
                    )))
                }
            }
        }
        for &i in &on {
            single[i] += 1;
            for &j in &on {
                pair[i * width + j] += 1;
            }
        }
    }
    Ok(CooccurrenceCounts {
        n: width,
        pair,
        single,
    })
}

/// `A_ij = M_ij / N_j`, zero for empty columns. With `threshold`, entries at
/// or above it become 1 and the rest 0.
pub fn conditional_adjacency(counts: &CooccurrenceCounts, threshold: Option<f64>) -> Tensor {
    let n = counts.n;
    let mut a = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let nj = counts.single[j];
            if nj == 0 {
                continue;
            }
            let p = counts.pair(i, j) as f64 / nj as f64;
            let p = match threshold {
                Some(t) => f64::from(p >= t),
                None => p,
            };
            a.set(i, j, p);
        }
    }
    a
}

/// Related inexact classes for each target class, by name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelatedClassSets {
    pub relations: BTreeMap<String, BTreeSet<String>>,
}

impl RelatedClassSets {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn relate(&mut self, target: &str, inexact: &str) {
        self.relations
            .entry(target.to_string())
            .or_default()
            .insert(inexact.to_string());
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        for (t, rs) in &self.relations {
            space.target_index(t)?;
            for s in rs {
                space.inexact_index(s)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Embeddings {
    OneHot,
    Dense(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelGraph {
    pub space: LabelSpace,
    pub adjacency: Tensor,
    pub embeddings: Embeddings,
    pub relations: RelatedClassSets,
}

/// Places the inexact block and links each target to its related classes.
pub fn link_targets(
    space: &LabelSpace,
    block: &Tensor,
    relations: &RelatedClassSets,
) -> Result<LabelGraph> {
    space.validate()?;
    relations.validate(space)?;
    let s = space.n_inexact();
    if block.shape() != [s, s] {
        return Err(Error::dim("link_targets", block.shape(), &[s, s]));
    }
    let w = space.n_all();
    let mut a = Tensor::zeros(vec![w, w]);
    for i in 0..s {
        for j in 0..s {
            a.set(i, j, block.get(i, j));
        }
    }
    for (t, related) in &relations.relations {
        let ti = s + space.target_index(t)?;
        for r in related {
            let si = space.inexact_index(r)?;
            a.set(ti, si, 1.0);
            a.set(si, ti, 1.0);
        }
    }
    Ok(LabelGraph {
        space: space.clone(),
        adjacency: a,
        embeddings: Embeddings::OneHot,
        relations: relations.clone(),
    })
}

/// `D̃⁻¹(A + I)`: row-stochastic with a positive diagonal.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(Error::dim("normalize_adjacency", a.shape(), &[r, r]));
    }
    let mut out = a.clone();
    for i in 0..r {
        out.set(i, i, out.get(i, i) + 1.0);
        let sum: f64 = out.row(i).iter().sum();
        for j in 0..c {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    Ok(out)
}

/// Conditional co-occurrence over the whole class set, from complete labels.
pub fn weighted_full_graph(
    labels: &[(Vec<u8>, Option<Vec<u8>>)],
    space: &LabelSpace,
) -> Result<LabelGraph> {
    let mut joined = Vec::with_capacity(labels.len());
    for (k, (ys, yt)) in labels.iter().enumerate() {
        let Some(yt) = yt else {
            return Err(Error::Argument(format!(
                "instance {k} lacks target labels; the weighted graph needs ground truth"
            )));
        };
        let mut y = ys.clone();
        y.extend_from_slice(yt);
        joined.push(y);
    }
    let counts = count_cooccurrence(&joined, space.n_all())?;
    Ok(LabelGraph {
        space: space.clone(),
        adjacency: conditional_adjacency(&counts, None),
        embeddings: Embeddings::OneHot,
        relations: RelatedClassSets::new(),
    })
}

/// Deterministic target labels implied by the binary target links: target `i`
/// is on iff some active inexact class `j` has `A[i, j] == 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetRule {
    n_inexact: usize,
    linked: Vec<Vec<usize>>,
}

impl TargetRule {
    pub fn from_graph(graph: &LabelGraph) -> Self {
        let s = graph.space.n_inexact();
        let linked = (0..graph.space.n_target())
            .map(|t| {
                (0..s)
                    .filter(|&j| graph.adjacency.get(s + t, j) == 1.0)
                    .collect()
            })
            .collect();
        TargetRule {
            n_inexact: s,
            linked,
        }
    }

    pub fn n_target(&self) -> usize {
        self.linked.len()
    }

    pub fn apply(&self, y_s: &[u8]) -> Vec<u8> {
        debug_assert_eq!(y_s.len(), self.n_inexact);
        self.linked
            .iter()
            .map(|js| u8::from(js.iter().any(|&j| y_s[j] == 1)))
            .collect()
    }
}

pub fn estimate_target_prior(y_s: &[u8], graph: &LabelGraph) -> Result<Vec<u8>> {
    if y_s.len() != graph.space.n_inexact() {
        return Err(Error::dim(
            "estimate_target_prior",
            &[graph.space.n_inexact()],
            &[y_s.len()],
        ));
    }
    Ok(TargetRule::from_graph(graph).apply(y_s))
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EmbeddingsFile {
    Named(String),
    Dense(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    inexact_classes: Vec<String>,
    target_classes: Vec<String>,
    adjacency: Vec<f64>,
    embeddings: EmbeddingsFile,
    relations: RelatedClassSets,
}

impl LabelGraph {
    pub fn n_nodes(&self) -> usize {
        self.space.n_all()
    }

    pub fn embedding_matrix(&self) -> Tensor {
        match &self.embeddings {
            Embeddings::OneHot => Tensor::identity(self.n_nodes()),
            Embeddings::Dense(v) => v.clone(),
        }
    }

    pub fn normalized(&self) -> Result<Tensor> {
        normalize_adjacency(&self.adjacency)
    }

    /// Copy with every edge removed (classes become independent).
    pub fn without_edges(&self) -> LabelGraph {
        LabelGraph {
            adjacency: Tensor::zeros(self.adjacency.shape().to_vec()),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let embeddings = match &self.embeddings {
            Embeddings::OneHot => EmbeddingsFile::Named("one-hot".into()),
            Embeddings::Dense(t) => EmbeddingsFile::Dense(t.values().to_vec()),
        };
        let file = GraphFile {
            inexact_classes: self.space.inexact_classes.clone(),
            target_classes: self.space.target_classes.clone(),
            adjacency: self.adjacency.values().to_vec(),
            embeddings,
            relations: self.relations.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        let space = LabelSpace::new(file.inexact_classes, file.target_classes)?;
        let w = space.n_all();
        let adjacency = Tensor::new(vec![w, w], file.adjacency)?;
        let embeddings = match file.embeddings {
            EmbeddingsFile::Named(s) if s == "one-hot" => Embeddings::OneHot,
            EmbeddingsFile::Named(s) => {
                return Err(Error::Config(format!("unknown embedding kind `{s}`")))
            }
            EmbeddingsFile::Dense(v) => {
                if v.is_empty() || v.len() % w != 0 {
                    return Err(Error::dim("graph embeddings", &[w], &[v.len()]));
                }
                let m = v.len() / w;
                Embeddings::Dense(Tensor::matrix(w, m, v)?)
            }
        };
        file.relations.validate(&space)?;
        Ok(LabelGraph {
            space,
            adjacency,
            embeddings,
            relations: file.relations,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Re-indexes the graph to match `space`, which must name the same classes
    /// in each role (order may differ).
    pub fn aligned_to(&self, space: &LabelSpace) -> Result<LabelGraph> {
        space.validate()?;
        if space.n_inexact() != self.space.n_inexact() || space.n_target() != self.space.n_target()
        {
            return Err(Error::Config(
                "graph and label space declare different class counts".into(),
            ));
        }
        let mut perm = Vec::with_capacity(space.n_all());
        for c in &space.inexact_classes {
            perm.push(self.space.inexact_index(c)?);
        }
        for c in &space.target_classes {
            perm.push(self.space.n_inexact() + self.space.target_index(c)?);
        }
        let w = space.n_all();
        let mut a = Tensor::zeros(vec![w, w]);
        for i in 0..w {
            for j in 0..w {
                a.set(i, j, self.adjacency.get(perm[i], perm[j]));
            }
        }
        let embeddings = match &self.embeddings {
            Embeddings::OneHot => Embeddings::OneHot,
            Embeddings::Dense(v) => {
                let rows: Vec<Vec<f64>> = perm.iter().map(|&p| v.row(p).to_vec()).collect();
                Embeddings::Dense(Tensor::from_rows(&rows)?)
            }
        };
        Ok(LabelGraph {
            space: space.clone(),
            adjacency: a,
            embeddings,
            relations: self.relations.clone(),
        })
    }
}

/// Builds the full graph from inexact labels and prior-knowledge relations.
pub fn build_graph<L: AsRef<[u8]>>(
    labels: &[L],
    space: &LabelSpace,
    relations: &RelatedClassSets,
    threshold: Option<f64>,
) -> Result<LabelGraph> {
    let counts = count_cooccurrence(labels, space.n_inexact())?;
    let block = conditional_adjacency(&counts, threshold);
    link_targets(space, &block, relations)
}
