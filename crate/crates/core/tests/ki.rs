mod common;

use lexki::ki::{build_ki_batch, ki_loss, ki_loss_graph, sample_negative, KiConfig, KiHead, KiItem, UtteranceAlignments};
use lexki::model::layers::Dropout;
use lexki::model::{DialogModel, ModelConfig};
use lexki::numerics::{adam_step, AdamState, Graph, ParamStore, Rng, Tensor};
use lexki::Error;
use proptest::prelude::*;

fn cfg(d: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: d,
        n_layers: 1,
        n_heads: 1,
        d_ffn: 4,
        max_len: 16,
        dropout: 0.0,
    }
}

/// A 2-d head whose projections are the identity, so similarity is the
/// cosine of the raw inputs.
fn identity_head() -> DialogModel {
    let mut m = DialogModel::with_ki(
        cfg(2),
        KiConfig {
            d_ki: 2,
            ..KiConfig::default()
        },
        0,
    )
    .unwrap();
    for p in ["ki/f1", "ki/f2"] {
        let w = m.store.id(&format!("{p}/w")).unwrap();
        *m.store.get_mut(w) = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = m.store.id(&format!("{p}/b")).unwrap();
        *m.store.get_mut(b) = Tensor::zeros(&[1, 2]);
    }
    m
}

#[test]
fn similarity_examples() {
    let m = identity_head();
    let head = m.ki().unwrap();
    let s = |h: &[f32], k: &[f32]| head.similarity(&m.store, h, k).unwrap();
    assert!((s(&[0.3, -0.7], &[0.3, -0.7]) - 1.0).abs() < 1e-6);
    assert!((s(&[0.3, -0.7], &[-0.3, 0.7]) + 1.0).abs() < 1e-6);
    assert!((s(&[0.6, 0.8], &[1.0, 0.0]) - 0.6).abs() < 1e-6);
    // Normalization makes the score scale-free.
    assert!((s(&[3.0, 4.0], &[5.0, 0.0]) - 0.6).abs() < 1e-6);
}

#[test]
fn single_token_knowledge_is_its_scaled_embedding() {
    let m = DialogModel::with_ki(cfg(16), KiConfig::default(), 3).unwrap();
    let head = m.ki().unwrap();
    let g = head.encode_knowledge(&m.store, &[7]).unwrap();
    let table = m.store.get(m.store.id("embed").unwrap());
    let scale = 4.0f32;
    for (a, &e) in g.iter().zip(table.row_slice(7)) {
        assert!((a - e * scale).abs() < 1e-6);
    }
    assert_eq!(head.encode_knowledge(&m.store, &[4, 5, 6, 7, 8, 9, 10]).unwrap().len(), 16);
}

#[test]
fn duplicated_knowledge_has_same_encoding() {
    let m = DialogModel::with_ki(cfg(16), KiConfig::default(), 3).unwrap();
    let head = m.ki().unwrap();
    let once = head.encode_knowledge(&m.store, &[4, 9, 6]).unwrap();
    let twice = head.encode_knowledge(&m.store, &[4, 9, 6, 4, 9, 6]).unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn single_token_knowledge_with_encoder_layer() {
    let m = DialogModel::with_ki(
        cfg(16),
        KiConfig {
            encoder_layers: 1,
            ..KiConfig::default()
        },
        3,
    )
    .unwrap();
    let head = m.ki().unwrap();
    let mut g = Graph::new(&m.store);
    let pooled = head.encode_knowledge_graph(&mut g, &[&[7]], &mut Dropout::eval()).unwrap();
    assert_eq!(g.value(pooled).shape(), &[1, 16]);
    let direct = head.encode_knowledge(&m.store, &[7]).unwrap();
    assert_eq!(g.value(pooled).data(), &direct[..]);
    assert!(matches!(head.encode_knowledge(&m.store, &[4; 17]), Err(Error::TooLong { .. })));
}

proptest! {
    #[test]
    fn projections_are_unit_norm(h in prop::collection::vec(-50f32..50.0, 16), seed in 0u64..50) {
        prop_assume!(h.iter().any(|v| v.abs() > 1e-3));
        let m = DialogModel::with_ki(cfg(16), KiConfig::default(), seed).unwrap();
        let head = m.ki().unwrap();
        let mut g = Graph::new(&m.store);
        let x = g.constant(Tensor::row(h.clone())).unwrap();
        let a = head.project_tokens(&mut g, x).unwrap();
        let b = head.project_knowledge(&mut g, x).unwrap();
        for v in [a, b] {
            prop_assert!((g.value(v).norm() - 1.0).abs() < 1e-5);
        }
        let s = head.similarity(&m.store, &h, &h).unwrap();
        prop_assert!((-1.0 - 1e-5..=1.0 + 1e-5).contains(&s));
    }
}

#[test]
fn negatives_are_uniform_over_candidates() {
    let mut rng = Rng::new(2024);
    let pool = [1, 2, 3, 4];
    let own = [2];
    let n = 10_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[sample_negative(&pool, &own, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[2], 0);
    let expected = n as f64 / 3.0;
    let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    let mut chi2 = 0.0;
    for k in [1, 3, 4] {
        let c = counts[k] as f64;
        assert!((c - expected).abs() < 3.0 * sigma, "{counts:?}");
        chi2 += (c - expected).powi(2) / expected;
    }
    // 99.9th percentile of chi-square with two degrees of freedom.
    assert!(chi2 < 13.82, "chi2 = {chi2}");
}

#[test]
fn disjoint_utterances_force_the_other_id() {
    for seed in 0..20 {
        let utts = vec![
            UtteranceAlignments {
                row_offset: 0,
                aligned: vec![(0, 3)],
            },
            UtteranceAlignments {
                row_offset: 4,
                aligned: vec![(1, 8), (2, 8)],
            },
        ];
        let b = build_ki_batch(&utts, 1, &mut Rng::new(seed));
        assert_eq!(b.items[0].negatives, [8]);
        assert!(b.items[1..].iter().all(|i| i.negatives == [3]));
        for item in &b.items {
            assert!(!item.negatives.contains(&item.positive));
        }
    }
}

#[test]
fn hinge_examples() {
    assert_eq!(ki_loss(0.5, &[(0.9, 0.2)]), 0.0);
    assert_eq!(ki_loss(0.5, &[(0.4, 0.4)]), 0.5);
    assert_eq!(ki_loss(0.5, &[(0.1, 0.3)]), 0.7);
    assert_eq!(ki_loss(0.5, &[]), 0.0);
}

fn toy_store(rng: &mut Rng, n_tok: usize, n_kn: usize, d: usize) -> ParamStore {
    let mut store = ParamStore::new();
    let t: Vec<f32> = (0..n_tok * d).map(|_| rng.normal()).collect();
    let k: Vec<f32> = (0..n_kn * d).map(|_| rng.normal()).collect();
    store.add("tok", Tensor::matrix(n_tok, d, t).unwrap()).unwrap();
    store.add("kn", Tensor::matrix(n_kn, d, k).unwrap()).unwrap();
    store
}

fn toy_loss(g: &mut Graph, store: &ParamStore, items: &[KiItem], margin: f32) -> lexki::Result<lexki::numerics::Var> {
    let t = g.param(store.id("tok").unwrap());
    let k = g.param(store.id("kn").unwrap());
    let t = g.l2_normalize(t)?;
    let k = g.l2_normalize(k)?;
    ki_loss_graph(g, t, k, items, margin)
}

#[test]
fn satisfied_margin_has_zero_gradient() {
    let d = 4;
    let mut store = ParamStore::new();
    // s+ = 1, s- = 0: margin 0.5 is satisfied with room to spare.
    store.add("tok", Tensor::matrix(1, d, vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    store.add("kn", Tensor::matrix(2, d, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
    let items = [KiItem {
        row: 0,
        positive: 0,
        negative: 1,
    }];
    let grads = {
        let mut g = Graph::new(&store);
        let loss = toy_loss(&mut g, &store, &items, 0.5).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        g.backward(loss).unwrap()
    };
    for id in store.ids() {
        assert!(grads.get(id).data().iter().all(|&v| v == 0.0));
    }
    let f = |g: &mut Graph| toy_loss(g, &store.clone(), &items, 0.5);
    let mut probe = store.clone();
    let check = common::gradcheck::check(&mut probe, &f, 1e-3, 64, &mut Rng::new(0));
    for t in &check.tensors {
        assert!(t.numeric_norm < 1e-9, "{t:?}");
    }
}

#[test]
fn hinge_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let mut store = toy_store(&mut rng, 3, 4, 6);
    let items: Vec<KiItem> = (0..3)
        .map(|r| KiItem {
            row: r,
            positive: r,
            negative: 3,
        })
        .collect();
    let frozen = store.clone();
    let f = move |g: &mut Graph| toy_loss(g, &frozen, &items, 1.5);
    let check = common::gradcheck::check(&mut store, &f, 1e-3, 64, &mut rng);
    assert!(check.max_rel_err() < 1e-3, "{:?}", check.worst());
}

#[test]
fn one_adam_step_decreases_ki_loss() {
    for seed in 0..5 {
        let config = cfg(16);
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let embed = store.add("embed", lexki::numerics::init::normal(&[12, 16], 0.25, &mut rng)).unwrap();
        let head = KiHead::register(&mut store, &config, embed, KiConfig::default(), &mut rng).unwrap();
        // Frozen encoder output for two utterances of three tokens each.
        let h: Vec<f32> = (0..6 * 16).map(|_| rng.normal()).collect();
        let h = Tensor::matrix(6, 16, h).unwrap();
        let utts = vec![
            UtteranceAlignments {
                row_offset: 0,
                aligned: vec![(0, 0), (2, 1)],
            },
            UtteranceAlignments {
                row_offset: 3,
                aligned: vec![(1, 2)],
            },
        ];
        let batch = build_ki_batch(&utts, 1, &mut rng);
        let know = |k: usize| vec![[4, 5], [6, 7], [8, 9]][k].to_vec();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let hv = g.constant(h.clone()).unwrap();
            let l = head.batch_loss(&mut g, hv, &batch, &know, &mut Dropout::eval()).unwrap().unwrap();
            let v = g.value(l).item();
            (v, g.backward(l).unwrap())
        };
        let (before, grads) = eval(&store);
        assert!(before > 0.0);
        let mut adam = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut adam, 1e-3).unwrap();
        let (after, _) = eval(&store);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}
