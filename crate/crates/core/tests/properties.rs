use labelsynth::classifier::{Classifier, ClassifierConfig, ClassifierKind, GraphContext};
use labelsynth::eval::metrics::{average_precision, roc_auc};
use labelsynth::generative::{GenConfig, JointPrior, Model, NoiseDraw};
use labelsynth::graph::{
    conditional_adjacency, count_cooccurrence, estimate_target_prior, link_targets,
    normalize_adjacency, Embeddings, LabelGraph, LabelSpace, RelatedClassSets,
};
use labelsynth::numeric::gradcheck::{check_gradients, jitter, random_tensor};
use labelsynth::numeric::{kl_bernoulli_vec, kl_diag_gaussian_vs_std_normal, Tape, Tensor};
use labelsynth::params::ParamStore;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> impl Strategy<Value = Vec<Vec<u8>>> {
    (1usize..=6).prop_flat_map(|s| prop::collection::vec(prop::collection::vec(0u8..=1, s), 1..=30))
}

fn space(s: usize, t: usize) -> LabelSpace {
    LabelSpace::new(
        (0..s).map(|i| format!("s{i}")).collect(),
        (0..t).map(|i| format!("t{i}")).collect(),
    )
    .unwrap()
}

fn relations(s: usize, links: &[Vec<bool>]) -> RelatedClassSets {
    let mut rel = RelatedClassSets::new();
    for (t, row) in links.iter().enumerate() {
        for j in 0..s {
            if row[j % row.len()] {
                rel.relate(&format!("t{t}"), &format!("s{j}"));
            }
        }
    }
    rel
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_metrics_ignore_increasing_transforms(
        scores in prop::collection::vec(-1.0f64..1.0, 2..40),
        labels_seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(labels_seed);
        let mut labels: Vec<u8> = scores.iter().map(|_| rand::Rng::gen_bool(&mut rng, 0.5) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let moved: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
        let ap = average_precision(&scores, &labels).unwrap().unwrap();
        let auc = roc_auc(&scores, &labels).unwrap().unwrap();
        prop_assert_eq!(ap, average_precision(&moved, &labels).unwrap().unwrap());
        prop_assert_eq!(auc, roc_auc(&moved, &labels).unwrap().unwrap());
        prop_assert!((0.0..=1.0).contains(&ap) && (0.0..=1.0).contains(&auc));
    }

    #[test]
    fn cooccurrence_counts_are_consistent(labels in corpus()) {
        let s = labels[0].len();
        let c = count_cooccurrence(&labels, s).unwrap();
        let a = conditional_adjacency(&c, None);
        for i in 0..s {
            prop_assert_eq!(c.pair(i, i), c.single(i));
            for j in 0..s {
                prop_assert_eq!(c.pair(i, j), c.pair(j, i));
                prop_assert!(c.pair(i, j) <= c.single(i).min(c.single(j)));
                let v = a.get(i, j);
                prop_assert!((0.0..=1.0).contains(&v));
                if c.single(j) > 0 {
                    // One rounding separates the product from the integer.
                    let back = v * c.single(j) as f64;
                    prop_assert_eq!(back.round() as u64, c.pair(i, j));
                    prop_assert!((back - c.pair(i, j) as f64).abs() <= 1e-12 * c.single(j) as f64);
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn target_links_are_symmetric_and_keep_the_inexact_block(
        labels in corpus(),
        n_t in 1usize..=3,
        links in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..=6), 3),
    ) {
        let s = labels[0].len();
        let block = conditional_adjacency(&count_cooccurrence(&labels, s).unwrap(), None);
        let g = link_targets(&space(s, n_t), &block, &relations(s, &links[..n_t])).unwrap();
        let a = &g.adjacency;
        for i in 0..s {
            for j in 0..s {
                prop_assert_eq!(a.get(i, j).to_bits(), block.get(i, j).to_bits());
            }
        }
        for t in s..s + n_t {
            for j in 0..s {
                prop_assert_eq!(a.get(t, j), a.get(j, t));
                prop_assert!(a.get(t, j) == 0.0 || a.get(t, j) == 1.0);
            }
            for u in s..s + n_t {
                prop_assert_eq!(a.get(t, u), 0.0);
            }
        }
    }

    #[test]
    fn target_rule_is_monotone(
        s in 1usize..=6,
        links in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..=6), 2),
        y in prop::collection::vec(0u8..=1, 6),
        flip in 0usize..6,
    ) {
        let g = link_targets(&space(s, 2), &Tensor::zeros(vec![s, s]), &relations(s, &links)).unwrap();
        let y = &y[..s];
        let mut up = y.to_vec();
        up[flip % s] = 1;
        let before = estimate_target_prior(y, &g).unwrap();
        let after = estimate_target_prior(&up, &g).unwrap();
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn normalized_adjacency_is_row_stochastic(
        w in 1usize..=8,
        values in prop::collection::vec(0.0f64..=1.0, 64),
    ) {
        let a = Tensor::matrix(w, w, values[..w * w].to_vec()).unwrap();
        let n = normalize_adjacency(&a).unwrap();
        for i in 0..w {
            prop_assert!((n.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(n.get(i, i) > 0.0);
            prop_assert!(n.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn kl_terms_are_non_negative(
        mu in prop::collection::vec(-5.0f64..5.0, 1..6),
        log_sigma in prop::collection::vec(-4.0f64..4.0, 6),
        q in prop::collection::vec(1e-6f64..(1.0 - 1e-6), 1..6),
        p in prop::collection::vec(1e-6f64..(1.0 - 1e-6), 6),
    ) {
        let d = mu.len();
        let sigma: Vec<f64> = log_sigma[..d].iter().map(|l| l.exp()).collect();
        let kl = kl_diag_gaussian_vs_std_normal(&Tensor::vector(mu.clone()).unwrap(), &Tensor::vector(sigma).unwrap()).unwrap();
        prop_assert!(kl >= 0.0);
        let kb = kl_bernoulli_vec(&q, &p[..q.len()]).unwrap();
        prop_assert!(kb >= 0.0);
        prop_assert_eq!(kl_bernoulli_vec(&q, &q).unwrap(), 0.0);
        let zeros = Tensor::zeros(vec![d]);
        let ones = Tensor::full(vec![d], 1.0);
        prop_assert_eq!(kl_diag_gaussian_vs_std_normal(&zeros, &ones).unwrap(), 0.0);
    }

    #[test]
    fn tensor_length_matches_shape(r in 1usize..5, c in 1usize..5, extra in 0usize..3) {
        prop_assert!(Tensor::matrix(r, c, vec![0.0; r * c]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::matrix(r, c, vec![0.0; r * c + extra]).is_err());
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences(seed in any::<u64>(), p in 1usize..4, q in 1usize..4, r in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, vec![p, q], 1.0);
        let b = random_tensor(&mut rng, vec![q, r], 1.0);
        let err = check_gradients(&[a, b], 1e-5, |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.sigmoid(m);
            Ok(t.sum(s))
        }).unwrap();
        prop_assert!(err < 1e-6, "{}", err);
    }
}

fn tiny_model() -> (Model, LabelGraph) {
    let mut rel = RelatedClassSets::new();
    rel.relate("t0", "s0");
    let pool: Vec<Vec<u8>> = vec![vec![1, 0], vec![0, 1], vec![1, 1]];
    let block = conditional_adjacency(&count_cooccurrence(&pool, 2).unwrap(), None);
    let graph = link_targets(&space(2, 1), &block, &rel).unwrap();
    let gen = GenConfig {
        latent_dim: 2,
        encoder_hidden: vec![3],
        decoder_hidden: vec![3],
        ..GenConfig::default()
    };
    let cls = ClassifierConfig {
        kind: ClassifierKind::Gcn,
        extractor_hidden: vec![3],
        feature_dim: 2,
        gcn_hidden: vec![2],
    };
    (Model::new(gen, cls, 4, &graph).unwrap(), graph)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn total_loss_is_additive_with_non_negative_kl(seed in any::<u64>(), alpha in 0.0f64..5.0, beta in 0.0f64..5.0) {
        let (base, graph) = tiny_model();
        let m = Model::new(GenConfig { alpha, beta, ..base.gen.clone() }, base.classifier.config.clone(), 4, &graph).unwrap();
        let prior = JointPrior::new(vec![vec![1, 0], vec![0, 1], vec![1, 1]], &graph, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = m.init(seed).unwrap();
        jitter(&mut store, &mut rng, 0.5);
        let x_l = random_tensor(&mut rng, vec![3, 4], 1.0);
        let x_u = random_tensor(&mut rng, vec![2, 4], 1.0);
        let y_s = vec![vec![1, 0], vec![0, 0], vec![1, 1]];
        let noise = NoiseDraw::draw(&mut rng, 3, 2, 2, &prior, m.gen.constraint_label_source).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let lb = m.total_loss(&mut tape, &b, &x_l, &y_s, &x_u, &prior, &noise).unwrap().breakdown(&tape).unwrap();
        let rebuilt = -lb.recon + lb.kl_z + lb.kl_y + alpha * lb.l_cons + beta * lb.l_c_s;
        prop_assert!((lb.total - rebuilt).abs() <= 1e-10 * lb.total.abs().max(1.0));
        prop_assert!(lb.kl_z >= 0.0 && lb.kl_y >= 0.0);
    }

    #[test]
    fn classifier_is_permutation_equivariant(seed in any::<u64>(), s in 2usize..5, t in 1usize..3) {
        let w = s + t;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adj = Tensor::matrix(w, w, (0..w * w).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect()).unwrap();
        let emb = random_tensor(&mut rng, vec![w, 3], 1.0);
        let mut perm_s: Vec<usize> = (0..s).collect();
        perm_s.shuffle(&mut rng);
        let mut perm_t: Vec<usize> = (s..w).collect();
        perm_t.shuffle(&mut rng);
        // New position k holds old class perm[k].
        let perm: Vec<usize> = perm_s.into_iter().chain(perm_t).collect();
        let names: Vec<String> = (0..s).map(|i| format!("s{i}")).chain((0..t).map(|i| format!("t{i}"))).collect();
        let build = |order: &[usize]| LabelGraph {
            space: LabelSpace::new(
                order[..s].iter().map(|&i| names[i].clone()).collect(),
                order[s..].iter().map(|&i| names[i].clone()).collect(),
            ).unwrap(),
            adjacency: Tensor::matrix(w, w, (0..w * w).map(|k| adj.get(order[k / w], order[k % w])).collect()).unwrap(),
            embeddings: Embeddings::Dense(Tensor::matrix(w, 3, (0..w * 3).map(|k| emb.get(order[k / 3], k % 3)).collect()).unwrap()),
            relations: RelatedClassSets::new(),
        };
        let identity: Vec<usize> = (0..w).collect();
        let cfg = ClassifierConfig { kind: ClassifierKind::Gcn, extractor_hidden: vec![4], feature_dim: 3, gcn_hidden: vec![4] };
        let predict = |g: &LabelGraph| {
            let ctx = GraphContext::new(g).unwrap();
            let c = Classifier::new(cfg.clone(), "c", 5, &ctx);
            let mut store = ParamStore::new();
            c.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 2), vec![3, 5], 1.0);
            c.predict(&store, &ctx, &x).unwrap()
        };
        let p = predict(&build(&identity));
        let q = predict(&build(&perm));
        for r in 0..3 {
            for k in 0..w {
                prop_assert!((q.get(r, k) - p.get(r, perm[k])).abs() <= 1e-12);
            }
        }
    }
}
