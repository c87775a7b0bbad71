//! The nine acceptance criteria, each at its stated tolerance. Every test
//! prints one `criterion N [PASS|FAIL] ...` line to stderr (visible without
//! `--nocapture`) and then asserts.
//!
//! Tests take a global lock: several criteria time themselves, and the
//! desk-scale training runs are shared through a cache.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::gradcheck;
use common::oracles::*;
use lexki::analysis::{
    aligned_knowledge_distance, make_random_variant, make_sentence_level_variant, strategy_ablation,
};
use lexki::corpus::{tokenize, DialogExample, KnowledgeBase, KnowledgeItem, StopwordList, Vocabulary};
use lexki::ki::{hinge, ki_loss, ki_loss_graph, knowledge_token_ids, KiConfig, KiItem};
use lexki::metrics::{bleu4, distinct_n, evaluate, rouge_l, safe_rate, throughput, wiki_f1, EvalInputs};
use lexki::model::layers::Dropout;
use lexki::model::{
    batch_ki_items, batch_objective, prepare, source_ids, train_dialog, Checkpoint, DecodeParams, DialogModel,
    KiInputs, ModelConfig, TrainConfig,
};
use lexki::numerics::{Graph, ParamStore, Rng, Tensor};
use lexki::retriever::{
    build_index, build_weak_supervision, mine, mine_corpus, sentence_tokens, train_retriever, AlignmentRecord,
    KnowledgeIndex, MiningStrategies, RetrieverConfig, RetrieverModel, RetrieverTrainConfig,
};
use lexki::synthetic::{dialog_fixture, retrieval_fixture, DialogFixture, DialogFixtureConfig};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n} [{verdict}] {detail}");
}

// ---- 1. gradient correctness ----------------------------------------------

fn grad_world() -> (Vec<DialogExample>, KnowledgeBase, Vocabulary, Vec<Vec<(usize, usize)>>) {
    let corpus = vec![
        DialogExample::new("tell me about paris", "paris is a city in france"),
        DialogExample::new("do you like cats", "cats are small pets"),
        DialogExample::new("what about rome", "rome is in italy"),
        DialogExample::new("any dogs here", "dogs are loyal pets"),
    ];
    let kb = KnowledgeBase::from_items(
        [
            ("Paris", "Paris is the capital of France."),
            ("Cat", "The cat is a small pet."),
            ("Rome", "Rome is the capital of Italy."),
            ("Dog", "The dog is a loyal pet."),
        ]
        .iter()
        .enumerate()
        .map(|(id, (t, x))| KnowledgeItem {
            id,
            title: t.to_string(),
            text: x.to_string(),
        })
        .collect(),
    )
    .unwrap();
    let vocab = Vocabulary::from_corpus(&corpus, Some(&kb), 100).unwrap();
    // (token index in the utterance, knowledge id)
    let aligned = vec![vec![(3, 0), (0, 1)], vec![(3, 1)], vec![(2, 2), (1, 0)], vec![(1, 3), (2, 3)]];
    (corpus, kb, vocab, aligned)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let (corpus, kb, vocab, aligned) = grad_world();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 32,
        max_len: 16,
        dropout: 0.1,
    };
    let kc = KiConfig {
        d_ki: 8,
        ..KiConfig::default()
    };
    let know = knowledge_token_ids(&kb, &vocab, cfg.max_len);
    let data: Vec<_> = corpus.iter().map(|e| prepare(e, &vocab, cfg.max_len).unwrap()).collect();
    let batch: Vec<_> = data.iter().collect();
    let al: Vec<&[(usize, usize)]> = aligned.iter().map(Vec::as_slice).collect();
    let mut worst = [0.0f64; 3];
    let mut probed = 0;
    for seed in 0..5u64 {
        let model = DialogModel::with_ki(cfg.clone(), kc.clone(), seed).unwrap();
        let ki_batch = batch_ki_items(&batch, &al, 1, &mut Rng::new(seed));
        assert!(!ki_batch.items.is_empty());
        for (k, which) in ["nll", "ki", "joint"].iter().enumerate() {
            let f = |g: &mut Graph| {
                let o = batch_objective(&model, g, &batch, Some((&ki_batch, &know)), 1.0, &mut Dropout::eval())?;
                Ok(match *which {
                    "nll" => o.nll,
                    "ki" => o.ki.expect("batch has KI items"),
                    _ => o.loss,
                })
            };
            let mut store: ParamStore = model.store.clone();
            let check = gradcheck::check(&mut store, &f, 1e-2, 24, &mut Rng::new(100 + seed));
            worst[k] = worst[k].max(check.global_rel_err());
            probed += check.coords();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&e| e < 1e-3) && secs < 60.0;
    report(
        1,
        pass,
        &format!(
            "norm-wise rel err of the full gradient: nll {:.2e} ki {:.2e} joint {:.2e} (< 1e-3) over 5 seeds, {probed} coordinates probed, {secs:.1}s (< 60s)",
            worst[0], worst[1], worst[2]
        ),
    );
    assert!(pass);
}

// ---- 2. hinge unit suite --------------------------------------------------

/// Unit vectors in the plane with inner products `s_pos` and `s_neg`
/// against the token vector (1, 0).
fn hinge_store(s_pos: f32, s_neg: f32) -> ParamStore {
    let unit = |c: f32| vec![c, (1.0 - c * c).max(0.0).sqrt()];
    let mut store = ParamStore::new();
    store.add("tok", Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
    store.add("kn", Tensor::matrix(2, 2, [unit(s_pos), unit(s_neg)].concat()).unwrap()).unwrap();
    store
}

fn hinge_graph(g: &mut Graph, store: &ParamStore, margin: f32) -> lexki::Result<lexki::numerics::Var> {
    let t = g.param(store.id("tok").unwrap());
    let k = g.param(store.id("kn").unwrap());
    let item = [KiItem {
        row: 0,
        positive: 0,
        negative: 1,
    }];
    ki_loss_graph(g, t, k, &item, margin)
}

#[test]
fn criterion_2_hinge_suite() {
    let _g = serial();
    let cases = [
        ki_loss(0.5, &[(0.9, 0.2)]) == 0.0,
        ki_loss(0.5, &[(0.4, 0.4), (-0.3, -0.3)]) == 2.0 * 0.5,
        hinge(0.5, 0.4, 0.4) == 0.5,
        ki_loss(0.5, &[(0.1, 0.3)]) == 0.7,
    ];
    // The same cases through the differentiable graph, at f32.
    let graph_value = |sp: f32, sn: f32| {
        let store = hinge_store(sp, sn);
        let mut g = Graph::new(&store);
        let l = hinge_graph(&mut g, &store, 0.5).unwrap();
        g.value(l).item()
    };
    let graph_cases = [
        graph_value(0.9, 0.2) == 0.0,
        (graph_value(0.4, 0.4) - 0.5).abs() < 1e-6,
        (graph_value(0.1, 0.3) - 0.7).abs() < 1e-6,
    ];
    // Beyond the margin every parameter gets exactly zero gradient, and
    // central differences agree.
    let store = hinge_store(0.9, 0.2);
    let grads = {
        let mut g = Graph::new(&store);
        let l = hinge_graph(&mut g, &store, 0.5).unwrap();
        g.backward(l).unwrap()
    };
    let exact_zero = store.ids().all(|id| grads.get(id).data().iter().all(|&v| v == 0.0));
    let frozen = store.clone();
    let f = move |g: &mut Graph| hinge_graph(g, &frozen, 0.5);
    let mut probe = store.clone();
    let fd = gradcheck::check(&mut probe, &f, 1e-3, 64, &mut Rng::new(0));
    let fd_zero = fd.tensors.iter().all(|t| t.numeric_norm < 1e-9);
    let pass = cases.iter().chain(&graph_cases).all(|&c| c) && exact_zero && fd_zero;
    report(
        2,
        pass,
        &format!(
            "cases 0 / m / 0.7: {cases:?}, graph {graph_cases:?}; zero gradient beyond margin: analytic {exact_zero}, finite differences {fd_zero}"
        ),
    );
    assert!(pass);
}

// ---- 3. metric oracles ----------------------------------------------------

#[test]
fn criterion_3_metric_oracles() {
    let _g = serial();
    let mut rng = Rng::new(33);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |name: &'static str, d: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(d);
    };
    let (mut n_bleu, mut n_rouge, mut n_dist, mut n_f1, mut n_safe) = (0, 0, 0, 0, 0);
    for case in 0..60 {
        let n = 1 + rng.below(4);
        let refs: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 8)).collect();
        let mut hyps: Vec<Vec<String>> = (0..n).map(|_| random_sentence(&mut rng, 8)).collect();
        if case % 2 == 0 {
            hyps = refs.clone();
            let i = rng.below(n);
            if !hyps[i].is_empty() {
                let j = rng.below(hyps[i].len());
                hyps[i][j] = "z".into();
            }
        }
        if hyps.iter().any(|h| !h.is_empty()) {
            bump("bleu4", (bleu4(&hyps, &refs).unwrap() - oracle_bleu(&hyps, &refs)).abs());
            n_bleu += 1;
        }
        bump("rouge_l", (rouge_l(&hyps, &refs).unwrap() - oracle_rouge(&hyps, &refs)).abs());
        n_rouge += 1;
        for k in [1, 2] {
            bump("distinct_n", (distinct_n(&hyps, k) - oracle_distinct(&hyps, k)).abs());
        }
        n_dist += 1;
        let resp: Vec<String> = hyps.iter().map(|t| t.join(" ")).collect();
        let know: Vec<Option<String>> = refs.iter().map(|t| Some(t.join(" "))).collect();
        let want = hyps.iter().zip(&refs).map(|(a, b)| oracle_f1(a, b)).sum::<f64>() / n as f64;
        bump("wiki_f1", (wiki_f1(&resp, &know).unwrap() - want).abs());
        n_f1 += 1;
        let pool = ["i don't know .", "I\u{2019}m not sure", "sure , i know", "not sure", "hello"];
        let safe: Vec<String> = (0..n).map(|_| pool[rng.below(pool.len())].to_string()).collect();
        bump("safe_rate", (safe_rate(&safe).unwrap() - oracle_safe(&safe)).abs());
        n_safe += 1;
    }
    let counts_ok = [n_bleu, n_rouge, n_dist, n_f1, n_safe].iter().all(|&c| c >= 20);
    let within = worst.values().all(|&d| d < 1e-9);
    let same = vec![tokenize("the cat sat on the mat today")];
    let identity = bleu4(&same, &same).unwrap() == 100.0
        && rouge_l(&same, &same).unwrap() == 1.0
        && wiki_f1(&["the cat sat".to_string()], &[Some("the cat sat".to_string())]).unwrap() == 1.0;
    let pass = counts_ok && within && identity;
    report(
        3,
        pass,
        &format!(
            "cases bleu {n_bleu} rouge {n_rouge} distinct {n_dist} wikiF1 {n_f1} safe {n_safe}; max |d| {worst:?} (< 1e-9); identity 100 / 1.0: {identity}"
        ),
    );
    assert!(pass);
}

// ---- 4. retriever fixture -------------------------------------------------

/// Every score first, then a separate scan for the maximum.
fn naive_argmax(rows: &Tensor, q: &[f32]) -> (usize, f32) {
    let mut scores = Vec::with_capacity(rows.rows());
    for i in 0..rows.rows() {
        let mut s = 0.0f32;
        for j in 0..q.len() {
            s += rows.row_slice(i)[j] * q[j];
        }
        scores.push(s);
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (best, scores[best])
}

fn mined_ids(
    model: &RetrieverModel,
    index: &KnowledgeIndex,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    toks: &[String],
    strategies: MiningStrategies,
    sw: &StopwordList,
) -> HashMap<usize, (usize, Option<f32>)> {
    mine(model, index, kb, vocab, toks, strategies, sw)
        .unwrap()
        .into_iter()
        .map(|a| (a.token_index, (a.knowledge_id, a.score)))
        .collect()
}

#[test]
fn criterion_4_retriever_fixture() {
    let _g = serial();
    let f = retrieval_fixture(500, 0).unwrap();
    let sw = StopwordList::default();
    let vocab = Vocabulary::from_corpus(&[], Some(&f.kb), 100_000).unwrap();
    let rc = RetrieverConfig::desk(vocab.len());
    let pairs = build_weak_supervision(&f.kb, &sw, rc.max_len);
    let (model, rep) =
        train_retriever(&pairs, &f.kb, &vocab, rc.clone(), &RetrieverTrainConfig::default(), 0, &mut |_| {}).unwrap();
    let index = build_index(&model, &f.kb, &vocab).unwrap();
    let no_exact = MiningStrategies {
        exact_matching: false,
        ..MiningStrategies::default()
    };

    // Held-out pairs on tokens unique to one article, mined in their own
    // sentence with exact matching off.
    let mut by_article: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in &rep.heldout {
        by_article.entry(p.article).or_default().push(p.token_index);
    }
    let (mut hits, mut total) = (0, 0);
    for (&a, positions) in &by_article {
        let toks = sentence_tokens(&f.kb.items()[a].text, rc.max_len);
        let mined = mined_ids(&model, &index, &f.kb, &vocab, &toks, no_exact, &sw);
        for &i in positions {
            if f.unique_tokens.get(&toks[i]) != Some(&a) {
                continue;
            }
            total += 1;
            hits += usize::from(mined.get(&i).map(|m| m.0) == Some(a));
        }
    }
    let acc = hits as f64 / total.max(1) as f64;

    // Exact matching: every title token maps to its own article.
    let (mut t_hits, mut t_total) = (0, 0);
    for item in f.kb.items() {
        let toks = sentence_tokens(&item.text, rc.max_len);
        let mined = mined_ids(&model, &index, &f.kb, &vocab, &toks, MiningStrategies::default(), &sw);
        for (i, t) in toks.iter().enumerate() {
            if *t == item.title.to_lowercase() {
                t_total += 1;
                t_hits += usize::from(mined.get(&i).map(|m| m.0) == Some(item.id));
            }
        }
    }
    let title_acc = t_hits as f64 / t_total.max(1) as f64;

    // Mining argmax against a naive double loop over the index rows.
    let everything = MiningStrategies {
        stopword_masking: false,
        exact_matching: false,
    };
    let (mut compared, mut equal) = (0, 0);
    for item in f.kb.items().iter().step_by(5) {
        let toks = sentence_tokens(&item.text, rc.max_len);
        let ids = vocab.encode(&toks);
        let mut g = Graph::new(&model.store);
        let rows = model.context_rows(&mut g, &[&ids], &mut Dropout::eval()).unwrap();
        let q = g.value(rows).clone();
        let mined = mined_ids(&model, &index, &f.kb, &vocab, &toks, everything, &sw);
        for i in 0..toks.len() {
            let (k, s) = naive_argmax(index.rows(), q.row_slice(i));
            compared += 1;
            let m = mined[&i];
            equal += usize::from(m.0 == k && m.1.map(f32::to_bits) == Some(s.to_bits()));
        }
    }
    let pass = acc >= 0.90 && title_acc == 1.0 && compared > 0 && equal == compared;
    report(
        4,
        pass,
        &format!(
            "held-out unique-token accuracy {acc:.4} ({hits}/{total}, >= 0.90); title accuracy {title_acc} ({t_hits}/{t_total}); argmax bit-equal {equal}/{compared}"
        ),
    );
    assert!(pass);
}

// ---- shared desk-scale runs (5, 6, 7) ------------------------------------

struct World {
    fixture: DialogFixture,
    vocab: Vocabulary,
    sw: StopwordList,
    retriever: RetrieverModel,
    index: KnowledgeIndex,
    alignments: Vec<AlignmentRecord>,
    setup: Duration,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let start = Instant::now();
        let fixture = dialog_fixture(&DialogFixtureConfig::default(), 0).unwrap();
        let sw = StopwordList::default();
        let vocab = Vocabulary::from_corpus(&fixture.train, Some(&fixture.kb), 10_000).unwrap();
        let rc = RetrieverConfig::desk(vocab.len());
        let pairs = build_weak_supervision(&fixture.kb, &sw, rc.max_len);
        let (retriever, _) =
            train_retriever(&pairs, &fixture.kb, &vocab, rc, &RetrieverTrainConfig::default(), 0, &mut |_| {}).unwrap();
        let index = build_index(&retriever, &fixture.kb, &vocab).unwrap();
        let alignments = mine_corpus(
            &retriever,
            &index,
            &fixture.kb,
            &vocab,
            &fixture.train,
            MiningStrategies::default(),
            &sw,
        )
        .unwrap();
        World {
            fixture,
            vocab,
            sw,
            retriever,
            index,
            alignments,
            setup: start.elapsed(),
        }
    })
}

/// Equal steps for every run: no early stopping, final parameters.
fn desk_train_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 40,
        patience: 40,
        keep_best: false,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Variant {
    Lambda0,
    Token,
    Sentence,
    Random,
}

struct Run {
    model: DialogModel,
    secs: f64,
    steps: usize,
}

fn run(variant: Variant, seed: u64) -> Arc<Run> {
    static RUNS: OnceLock<Mutex<HashMap<(Variant, u64), Arc<Run>>>> = OnceLock::new();
    let cache = RUNS.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&(variant, seed)) {
        return r.clone();
    }
    let w = world();
    let al = match variant {
        Variant::Lambda0 => None,
        Variant::Token => Some(w.alignments.clone()),
        Variant::Sentence => Some(make_sentence_level_variant(&w.alignments)),
        Variant::Random => Some(make_random_variant(&w.alignments, &w.fixture.kb, seed).unwrap()),
    };
    let start = Instant::now();
    let ki = al.as_ref().map(|a| KiInputs {
        config: KiConfig::default(),
        kb: &w.fixture.kb,
        alignments: a,
    });
    let lambda = if al.is_some() { 1.0 } else { 0.0 };
    let out = train_dialog(
        &w.fixture.train,
        &w.fixture.valid,
        &w.vocab,
        ModelConfig::desk(w.vocab.len()),
        ki,
        lambda,
        &desk_train_config(),
        seed,
        &mut |_| {},
    )
    .unwrap();
    let r = Arc::new(Run {
        model: out.model,
        secs: start.elapsed().as_secs_f64(),
        steps: out.steps.len(),
    });
    cache.lock().unwrap().insert((variant, seed), r.clone());
    r
}

#[test]
fn criterion_5_aligned_tokens_move_toward_their_knowledge() {
    let _g = serial();
    let w = world();
    let (plain, ki) = (run(Variant::Lambda0, 0), run(Variant::Token, 0));
    let dist = |m: &DialogModel| {
        aligned_knowledge_distance(m, &w.vocab, &w.fixture.kb, &w.fixture.train, &w.alignments, &w.sw).unwrap()
    };
    let (d0, d1) = (dist(&plain.model), dist(&ki.model));
    let secs = w.setup.as_secs_f64() + plain.secs + ki.secs;
    let reduction = 1.0 - d1 / d0;
    let pass = d1 <= 0.9 * d0 && plain.steps == ki.steps && secs < 600.0;
    report(
        5,
        pass,
        &format!(
            "mean aligned-token distance lambda=0 {d0:.4} lambda=1 {d1:.4}: {:.1}% smaller (>= 10%), {} steps each, vocab {}, {} train pairs, {secs:.0}s (< 600s)",
            100.0 * reduction,
            plain.steps,
            w.vocab.len(),
            w.fixture.train.len()
        ),
    );
    assert!(pass);
}

struct GenStats {
    distinct2: f64,
    safe: f64,
}

fn gen_stats(variant: Variant, seed: u64) -> GenStats {
    let w = world();
    let r = run(variant, seed);
    let p = DecodeParams::default();
    let hyps: Vec<String> =
        w.fixture.test.iter().map(|e| r.model.respond(&e.context, &e.utterance, &w.vocab, &p).unwrap()).collect();
    let toks: Vec<Vec<String>> = hyps.iter().map(|h| tokenize(h)).collect();
    GenStats {
        distinct2: distinct_n(&toks, 2),
        safe: safe_rate(&hyps).unwrap(),
    }
}

#[test]
fn criterion_6_diversity_and_safety_ordering() {
    let _g = serial();
    let (mut claim_a, mut claim_b) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..3 {
        let base = gen_stats(Variant::Lambda0, seed);
        let tok = gen_stats(Variant::Token, seed);
        let sent = gen_stats(Variant::Sentence, seed);
        let rand = gen_stats(Variant::Random, seed);
        let a = tok.distinct2 > base.distinct2 && tok.safe < base.safe;
        let b = tok.distinct2 > sent.distinct2 && sent.distinct2 > rand.distinct2;
        claim_a += usize::from(a);
        claim_b += usize::from(b);
        rows.push(format!(
            "seed {seed}: D2 l0 {:.4} tok {:.4} sent {:.4} rand {:.4}, safe l0 {:.3} tok {:.3} ({}/{})",
            base.distinct2,
            tok.distinct2,
            sent.distinct2,
            rand.distinct2,
            base.safe,
            tok.safe,
            if a { "A" } else { "-" },
            if b { "B" } else { "-" }
        ));
    }
    let pass = claim_a >= 2 && claim_b >= 2;
    report(
        6,
        pass,
        &format!(
            "lambda=1 beats lambda=0 on D2 and %safe in {claim_a}/3 seeds; token > sentence > random on D2 in {claim_b}/3 (each >= 2/3). {}",
            rows.join("; ")
        ),
    );
    assert!(pass);
}

// ---- 7. inference parity --------------------------------------------------

#[test]
fn criterion_7_inference_parity() {
    let _g = serial();
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let load = |v: Variant, name: &str| {
        let path = dir.path().join(name);
        run(v, 0).model.save(&path).unwrap();
        DialogModel::load(&path).unwrap()
    };
    let plain = load(Variant::Lambda0, "plain.ckpt");
    let ki = load(Variant::Token, "ki.ckpt");
    assert!(plain.ki().is_none() && ki.ki().is_some());
    let p = DecodeParams {
        min_len: 16,
        max_len: 16,
        ..DecodeParams::default()
    };
    let srcs: Vec<Vec<usize>> = w.fixture.test[..40]
        .iter()
        .map(|e| source_ids(&e.context, &e.utterance, &w.vocab, plain.config.max_len).unwrap().0)
        .collect();
    let mut traces_equal = true;
    let mut ops = 0;
    for s in &srcs {
        let (ya, ta) = plain.generate_traced(s, &p).unwrap();
        let (yb, tb) = ki.generate_traced(s, &p).unwrap();
        assert_eq!((ya.len(), yb.len()), (16, 16));
        traces_equal &= ta == tb;
        ops += ta.len();
    }
    // Wall-clock jitter on a shared core is large and one-sided, so each
    // input is timed on its own, the two models alternate input by input,
    // and each input keeps its fastest of ten rounds.
    let time = |m: &DialogModel, s: &[usize]| {
        let t = Instant::now();
        let n = m.generate(s, &p).unwrap().len();
        (n, t.elapsed())
    };
    let mut best = vec![(Duration::MAX, Duration::MAX); srcs.len()];
    let mut tokens = 0;
    for round in 0..10 {
        tokens = 0;
        for (s, b) in srcs.iter().zip(&mut best) {
            let (ra, rb) = if round % 2 == 0 {
                let a = time(&plain, s);
                (a, time(&ki, s))
            } else {
                let k = time(&ki, s);
                (time(&plain, s), k)
            };
            assert_eq!(ra.0, rb.0);
            tokens += ra.0;
            b.0 = b.0.min(ra.1);
            b.1 = b.1.min(rb.1);
        }
    }
    let best_a: Duration = best.iter().map(|b| b.0).sum();
    let best_b: Duration = best.iter().map(|b| b.1).sum();
    let (ta, tb) = (throughput(srcs.len(), tokens, best_a), throughput(srcs.len(), tokens, best_b));
    let gap = (ta.tokens_per_sec - tb.tokens_per_sec).abs() / ta.tokens_per_sec.max(tb.tokens_per_sec);
    let pass = traces_equal && gap < 0.05;
    report(
        7,
        pass,
        &format!(
            "op traces identical: {traces_equal} ({ops} ops over {} inputs); tokens/s lambda=0 {:.1} lambda=1 {:.1}, gap {:.2}% (< 5%)",
            srcs.len(),
            ta.tokens_per_sec,
            tb.tokens_per_sec,
            100.0 * gap
        ),
    );
    assert!(pass);
}

// ---- 8. determinism and persistence ---------------------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let _g = serial();
    let w = world();
    let n = 300;
    let train = &w.fixture.train[..n];
    let al: Vec<AlignmentRecord> = w.alignments.iter().filter(|r| r.example_id < n).cloned().collect();
    let tc = TrainConfig {
        max_steps: Some(10),
        ..TrainConfig::default()
    };
    let go = || {
        let ki = KiInputs {
            config: KiConfig::default(),
            kb: &w.fixture.kb,
            alignments: &al,
        };
        train_dialog(train, &w.fixture.valid[..50], &w.vocab, ModelConfig::desk(w.vocab.len()), Some(ki), 1.0, &tc, 7, &mut |_| {})
            .unwrap()
    };
    let (a, b) = (go(), go());
    let bits = |o: &lexki::model::TrainOutcome| -> Vec<(u32, u32, Option<u32>)> {
        o.steps.iter().map(|s| (s.loss.to_bits(), s.nll.to_bits(), s.ki.map(f32::to_bits))).collect()
    };
    let same_losses = a.steps.len() == 10 && bits(&a) == bits(&b);
    let bytes = a.model.to_checkpoint().to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.model.save(&path).unwrap();
    let loaded = DialogModel::load(&path).unwrap();
    let resaved = loaded.to_checkpoint().to_bytes();
    let round_trip = resaved == bytes
        && Checkpoint::from_bytes(&bytes).unwrap().to_bytes() == bytes
        && std::fs::read(&path).unwrap() == bytes
        && b.model.to_checkpoint().to_bytes() == bytes;
    let pass = same_losses && round_trip;
    report(
        8,
        pass,
        &format!(
            "first 10 step losses bit-identical across two runs: {same_losses}; save -> load -> save byte-identical: {round_trip} ({} bytes)",
            bytes.len()
        ),
    );
    assert!(pass);
}

// ---- 9. strategy ablation -------------------------------------------------

#[test]
fn criterion_9_strategy_ablation() {
    let _g = serial();
    let w = world();
    let ab = strategy_ablation(&w.retriever, &w.index, &w.fixture.kb, &w.vocab, &w.fixture.train, &w.sw).unwrap();
    let summary = ab.summary();
    let differ = summary[1..].iter().all(|(_, _, d)| *d >= 0.01);
    let n = 200;
    let test = &w.fixture.test[..30];
    let mut completed = 0;
    for records in [&ab.full, &ab.without_stopword_masking, &ab.without_exact_matching] {
        let al: Vec<AlignmentRecord> = records.iter().filter(|r| r.example_id < n).cloned().collect();
        let tc = TrainConfig {
            max_steps: Some(20),
            ..TrainConfig::default()
        };
        let ki = KiInputs {
            config: KiConfig::default(),
            kb: &w.fixture.kb,
            alignments: &al,
        };
        let out = train_dialog(
            &w.fixture.train[..n],
            &w.fixture.valid[..30],
            &w.vocab,
            ModelConfig::desk(w.vocab.len()),
            Some(ki),
            1.0,
            &tc,
            0,
            &mut |_| {},
        )
        .unwrap();
        let start = Instant::now();
        let p = DecodeParams::default();
        let hyps: Vec<String> =
            test.iter().map(|e| out.model.respond(&e.context, &e.utterance, &w.vocab, &p).unwrap()).collect();
        let tokens = hyps.iter().map(|h| tokenize(h).len()).sum();
        let refs: Vec<String> = test.iter().map(|e| e.response.clone()).collect();
        let know: Vec<Option<String>> = test.iter().map(|e| e.knowledge.clone()).collect();
        let rep = evaluate(&EvalInputs {
            hypotheses: &hyps,
            references: &refs,
            knowledge: Some(&know),
            kb: Some(&w.fixture.kb),
            alignments: None,
            ppl: Some(out.model.perplexity(test, &w.vocab).unwrap()),
            throughput: throughput(test.len(), tokens, start.elapsed()),
        })
        .unwrap();
        rep.validate().unwrap();
        completed += 1;
    }
    let pass = differ && completed == 3;
    let rows: Vec<String> =
        summary.iter().map(|(name, k, d)| format!("{name} {k} records ({:.2}% differ)", 100.0 * d)).collect();
    report(
        9,
        pass,
        &format!("{} (each ablation >= 1%); pipelines completed {completed}/3", rows.join(", ")),
    );
    assert!(pass);
}
