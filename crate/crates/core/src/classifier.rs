//! Multi-label classifier whose per-class weight vectors are synthesized by a
//! GCN over the class graph.
//!
//! A feature extractor maps an instance to `h_f ∈ R^F`. The GCN propagates
//! class embeddings `H⁰ = V` through `H^{l+1} = f(Â H^l W^l)` with
//! `Â = D̃⁻¹(A + I)`; the last layer is linear and yields one `F`-dimensional
//! weight row per class. Logits are `h_f · W_classᵀ`. The `Independent` kind
//! swaps the GCN for a free `|W| × F` weight matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LabelGraph;
use crate::numeric::prob::bce_var;
use crate::numeric::{sigmoid, Tape, Tensor, Var, PROB_EPS};
use crate::params::{glorot, init_mlp, mlp, Bound, ParamStore, LEAKY_SLOPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// Class weights synthesized by the GCN.
    Gcn,
    /// One free weight row per class; no label dependencies.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub extractor_hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Hidden widths between GCN layers; the number of GCN layers is one more.
    pub gcn_hidden: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Gcn,
            extractor_hidden: vec![128, 128],
            feature_dim: 32,
            gcn_hidden: vec![32],
        }
    }
}

/// Graph inputs the classifier consumes, precomputed once per run.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphContext {
    pub normalized: Tensor,
    pub embeddings: Tensor,
    pub n_inexact: usize,
    pub n_target: usize,
}

impl GraphContext {
    pub fn new(graph: &LabelGraph) -> Result<Self> {
        let embeddings = graph.embedding_matrix();
        if embeddings.rows() != graph.n_nodes() {
            return Err(Error::dim(
                "graph embeddings",
                embeddings.shape(),
                &[graph.n_nodes()],
            ));
        }
        Ok(GraphContext {
            normalized: graph.normalized()?,
            embeddings,
            n_inexact: graph.space.n_inexact(),
            n_target: graph.space.n_target(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_inexact + self.n_target
    }
}

/// Per-instance class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_s_hat: Vec<f64>,
    pub y_t_hat: Vec<f64>,
}

impl Prediction {
    pub fn clamped(&self) -> Prediction {
        let c = |v: &Vec<f64>| {
            v.iter()
                .map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS))
                .collect()
        };
        Prediction {
            y_s_hat: c(&self.y_s_hat),
            y_t_hat: c(&self.y_t_hat),
        }
    }
}

/// Architecture descriptor; weights live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub prefix: String,
    pub input_dim: usize,
    pub n_nodes: usize,
    pub embed_dim: usize,
}

impl Classifier {
    pub fn new(
        config: ClassifierConfig,
        prefix: impl Into<String>,
        input_dim: usize,
        ctx: &GraphContext,
    ) -> Self {
        Classifier {
            config,
            prefix: prefix.into(),
            input_dim,
            n_nodes: ctx.n_nodes(),
            embed_dim: ctx.embeddings.cols(),
        }
    }

    fn extractor_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.config.extractor_hidden);
        w.push(self.config.feature_dim);
        w
    }

    fn gcn_widths(&self) -> Vec<usize> {
        let mut w = vec![self.embed_dim];
        w.extend(&self.config.gcn_hidden);
        w.push(self.config.feature_dim);
        w
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        init_mlp(
            store,
            rng,
            &format!("{}/extractor", self.prefix),
            &self.extractor_widths(),
        )?;
        match self.config.kind {
            ClassifierKind::Gcn => {
                for (l, w) in self.gcn_widths().windows(2).enumerate() {
                    store.insert(
                        format!("{}/gcn/{l}/weight", self.prefix),
                        glorot(rng, w[0], w[1]),
                    )?;
                }
            }
            ClassifierKind::Independent => {
                store.insert(
                    format!("{}/head/weight", self.prefix),
                    glorot(rng, self.n_nodes, self.config.feature_dim),
                )?;
            }
        }
        Ok(())
    }

    /// `h_f` for every row of `x`.
    pub fn extract_features(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        if d != self.input_dim {
            return Err(Error::dim("extract_features", &[d], &[self.input_dim]));
        }
        mlp(
            tape,
            bound,
            &format!("{}/extractor", self.prefix),
            self.config.extractor_hidden.len() + 1,
            x,
        )
    }

    /// Stacked class weights `[W_s; W_t]`, one row per class.
    pub fn synthesize_classifiers(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &GraphContext,
    ) -> Result<Var> {
        match self.config.kind {
            ClassifierKind::Independent => bound.var(&format!("{}/head/weight", self.prefix)),
            ClassifierKind::Gcn => {
                if ctx.embeddings.cols() != self.embed_dim || ctx.n_nodes() != self.n_nodes {
                    return Err(Error::dim(
                        "synthesize_classifiers",
                        ctx.embeddings.shape(),
                        &[self.n_nodes, self.embed_dim],
                    ));
                }
                let adj = tape.constant(ctx.normalized.clone());
                let mut h = tape.constant(ctx.embeddings.clone());
                let n_layers = self.config.gcn_hidden.len() + 1;
                for l in 0..n_layers {
                    let w = bound.var(&format!("{}/gcn/{l}/weight", self.prefix))?;
                    let agg = tape.matmul(adj, h)?;
                    h = tape.matmul(agg, w)?;
                    if l + 1 < n_layers {
                        h = tape.leaky_relu(h, LEAKY_SLOPE);
                    }
                }
                Ok(h)
            }
        }
    }

    /// Logits for every class, `n × |W|`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &GraphContext,
        x: Var,
    ) -> Result<Var> {
        let h = self.extract_features(tape, bound, x)?;
        let w = self.synthesize_classifiers(tape, bound, ctx)?;
        tape.matmul_nt(h, w)
    }

    /// Probabilities clamped to `[ε, 1−ε]`, ready for logarithms.
    pub fn probs(&self, tape: &mut Tape, bound: &Bound, ctx: &GraphContext, x: Var) -> Result<Var> {
        let z = self.logits(tape, bound, ctx, x)?;
        let p = tape.sigmoid(z);
        Ok(tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }

    /// Unclamped sigmoid probabilities, `n × |W|`.
    pub fn predict(&self, store: &ParamStore, ctx: &GraphContext, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = store.subset(&self.prefix).bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let z = self.logits(&mut tape, &bound, ctx, xv)?;
        let z = tape.value(z);
        Tensor::new(
            z.shape().to_vec(),
            z.values().iter().map(|&v| sigmoid(v)).collect(),
        )
    }

    pub fn classify(
        &self,
        store: &ParamStore,
        ctx: &GraphContext,
        x: &[f64],
    ) -> Result<Prediction> {
        let p = self.predict(store, ctx, &Tensor::matrix(1, x.len(), x.to_vec())?)?;
        let row = p.row(0);
        Ok(Prediction {
            y_s_hat: row[..ctx.n_inexact].to_vec(),
            y_t_hat: row[ctx.n_inexact..].to_vec(),
        })
    }

    pub fn is_own(&self, name: &str) -> bool {
        name.starts_with(&format!("{}/", self.prefix))
    }
}

/// Mean multi-label cross-entropy over the inexact columns of clamped
/// probabilities `probs` (`n × |W|`) against binary `y_s` (`n × |S|`).
pub fn loss_supervised(tape: &mut Tape, probs: Var, y_s: Var, n_inexact: usize) -> Result<Var> {
    let ps = tape.slice_cols(probs, 0, n_inexact)?;
    let rows = bce_var(tape, ps, y_s)?;
    Ok(tape.mean(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{link_targets, LabelSpace, RelatedClassSets};
    use crate::numeric::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx_from(adj: Tensor, s: usize) -> GraphContext {
        let w = adj.rows();
        let space = LabelSpace::new(
            (0..s).map(|i| format!("s{i}")).collect(),
            (s..w).map(|i| format!("t{i}")).collect(),
        )
        .unwrap();
        let mut g =
            link_targets(&space, &Tensor::zeros(vec![s, s]), &RelatedClassSets::new()).unwrap();
        g.adjacency = adj;
        GraphContext::new(&g).unwrap()
    }

    fn one_layer() -> ClassifierConfig {
        ClassifierConfig {
            kind: ClassifierKind::Gcn,
            extractor_hidden: vec![],
            feature_dim: 2,
            gcn_hidden: vec![],
        }
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let ctx = ctx_from(Tensor::zeros(vec![2, 2]), 1);
        let c = Classifier::new(ClassifierConfig::default(), "c", 3, &ctx);
        let mut store = ParamStore::new();
        c.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for (name, t) in store.iter_mut() {
            if name.contains("extractor") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let h = c.extract_features(&mut tape, &b, x).unwrap();
        assert!(tape.value(h).values().iter().all(|&v| v == 0.0));
        let p = c.classify(&store, &ctx, &[1.0, 2.0, 3.0]).unwrap();
        assert!(p.y_s_hat.iter().chain(&p.y_t_hat).all(|&v| v == 0.5));
    }

    #[test]
    fn single_linear_extractor_is_matrix_product() {
        let ctx = ctx_from(Tensor::zeros(vec![2, 2]), 1);
        let c = Classifier::new(one_layer(), "c", 3, &ctx);
        let mut store = ParamStore::new();
        c.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let w = store.get("c/extractor/0/weight").unwrap().clone();
        let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = c.extract_features(&mut tape, &b, xv).unwrap();
        assert_eq!(tape.value(h), &x.matmul(&w).unwrap());
    }

    #[test]
    fn no_edges_keeps_classes_independent() {
        let ctx = ctx_from(Tensor::zeros(vec![2, 2]), 1);
        let c = Classifier::new(one_layer(), "c", 3, &ctx);
        let mut store = ParamStore::new();
        c.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let w = c.synthesize_classifiers(&mut tape, &b, &ctx).unwrap();
        assert_eq!(
            tape.value(w).values(),
            store.get("c/gcn/0/weight").unwrap().values()
        );
    }

    #[test]
    fn two_node_mixing_hand_value() {
        let ctx = ctx_from(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(), 1);
        let c = Classifier::new(one_layer(), "c", 3, &ctx);
        let mut store = ParamStore::new();
        c.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        *store.get_mut("c/gcn/0/weight").unwrap() = Tensor::identity(2);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let w = c.synthesize_classifiers(&mut tape, &b, &ctx).unwrap();
        assert_eq!(tape.value(w).values(), &[0.5; 4]);
    }

    #[test]
    fn sigmoid_saturation_and_clamp() {
        assert!(sigmoid(30.0) >= 1.0 - 1e-12);
        assert!(sigmoid(-30.0) <= 1e-12);
        let p = Prediction {
            y_s_hat: vec![sigmoid(60.0)],
            y_t_hat: vec![sigmoid(-800.0)],
        }
        .clamped();
        assert!(p.y_s_hat[0] < 1.0 && p.y_t_hat[0] > 0.0);
    }

    #[test]
    fn supervised_loss_hand_value() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(vec![3, 5], 0.5));
        let y = tape.constant(
            Tensor::matrix(3, 4, vec![1., 0., 1., 1., 0., 0., 0., 1., 1., 1., 1., 1.]).unwrap(),
        );
        let l = loss_supervised(&mut tape, p, y, 4).unwrap();
        assert!((tape.value(l).item().unwrap() - 4.0 * 2f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(1, 2, vec![1.0 - PROB_EPS, PROB_EPS]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = loss_supervised(&mut tape, p, y, 2).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let ctx = ctx_from(
            Tensor::matrix(3, 3, vec![1.0, 0.4, 1.0, 0.7, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
            2,
        );
        let cfg = ClassifierConfig {
            extractor_hidden: vec![5],
            feature_dim: 3,
            gcn_hidden: vec![4],
            ..ClassifierConfig::default()
        };
        let c = Classifier::new(cfg, "c", 4, &ctx);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            c.init(&mut store, &mut rng).unwrap();
            let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
            let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
            let x = crate::numeric::gradcheck::random_tensor(&mut rng, vec![3, 4], 1.0);
            let y = Tensor::matrix(3, 2, vec![1., 0., 0., 1., 1., 1.]).unwrap();
            let err = check_gradients(&tensors, 1e-5, |tape, vars| {
                let bound = bind_vars(&names, vars);
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let p = c.probs(tape, &bound, &ctx, xv)?;
                loss_supervised(tape, p, yv, 2)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    fn bind_vars(names: &[String], vars: &[Var]) -> Bound {
        Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
    }
}
