use serde::Serialize;

use super::{content_positions, encode_kb, sentence_tokens, RetrieverConfig, RetrieverModel};
use crate::corpus::{KnowledgeBase, StopwordList, Vocabulary};
use crate::error::{Error, Result};
use crate::ki::{ki_loss_graph, KiItem};
use crate::model::layers::Dropout;
use crate::numerics::{adam_step, AdamState, DecayMode, Graph, LrSchedule, Rng};

/// A first-sentence token paired with its own article.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WeakPair {
    pub article: usize,
    pub token_index: usize,
    pub positive: usize,
}

/// One pair per non-stopword token of every knowledge sentence.
pub fn build_weak_supervision(kb: &KnowledgeBase, stopwords: &StopwordList, max_len: usize) -> Vec<WeakPair> {
    let mut out = Vec::new();
    for item in kb.items() {
        let toks = sentence_tokens(&item.text, max_len);
        for i in content_positions(&toks, Some(stopwords)) {
            out.push(WeakPair {
                article: item.id,
                token_index: i,
                positive: item.id,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverTrainConfig {
    pub max_epochs: usize,
    pub articles_per_batch: usize,
    pub patience: usize,
    /// Share of pairs held out for early stopping.
    pub heldout_fraction: f32,
    /// Negatives per pair drawn from the other articles of the batch;
    /// `None` contrasts against every one of them.
    pub negatives: Option<usize>,
    pub schedule: LrSchedule,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        RetrieverTrainConfig {
            max_epochs: 100,
            articles_per_batch: 32,
            patience: 10,
            heldout_fraction: 0.1,
            negatives: None,
            schedule: LrSchedule {
                peak: 0.002,
                warmup_steps: 50,
                decay: DecayMode::InverseSqrt,
                ..LrSchedule::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrieverEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrieverTrainReport {
    pub epochs: Vec<RetrieverEpoch>,
    pub best_epoch: usize,
    pub train_pairs: usize,
    /// Pairs kept out of training for early stopping.
    pub heldout: Vec<WeakPair>,
}

fn batches(articles: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = articles.chunks(size.max(2)).map(<[usize]>::to_vec).collect();
    // A lone article has no in-batch negative; fold it into the previous batch.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(last);
        }
    }
    out
}

/// Hinge loss of one batch of articles; returns None when no pair applies.
fn batch_loss(
    model: &RetrieverModel,
    g: &mut Graph,
    batch: &[usize],
    pairs_of: &[Vec<usize>],
    sents: &[Vec<usize>],
    drop: &mut Dropout,
    negatives: Option<usize>,
    rng: &mut Rng,
) -> Result<Option<crate::numerics::Var>> {
    let refs: Vec<&[usize]> = batch.iter().map(|&a| sents[a].as_slice()).collect();
    let mut items = Vec::new();
    let mut offset = 0;
    for (slot, &a) in batch.iter().enumerate() {
        for &tok in &pairs_of[a] {
            let negs: Vec<usize> = match negatives {
                Some(k) => (0..k)
                    .map(|_| {
                        let n = rng.below(batch.len() - 1);
                        if n >= slot {
                            n + 1
                        } else {
                            n
                        }
                    })
                    .collect(),
                None => (0..batch.len()).filter(|&n| n != slot).collect(),
            };
            for neg in negs {
                items.push(KiItem {
                    row: offset + tok,
                    positive: slot,
                    negative: neg,
                });
            }
        }
        offset += sents[a].len();
    }
    if items.is_empty() {
        return Ok(None);
    }
    let ctx = model.context_rows(g, &refs, drop)?;
    let kn = model.knowledge_rows(g, &refs, drop)?;
    // Averaged per pair so the learning rate does not depend on batch size.
    let total = ki_loss_graph(g, ctx, kn, &items, model.config.margin)?;
    Ok(Some(g.scale(total, 1.0 / items.len() as f32)?))
}

/// Train the dual encoder with in-batch negatives from other articles and
/// keep the parameters with the lowest held-out pair loss.
pub fn train_retriever(
    pairs: &[WeakPair],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    config: RetrieverConfig,
    train: &RetrieverTrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&RetrieverEpoch),
) -> Result<(RetrieverModel, RetrieverTrainReport)> {
    let mut articles: Vec<usize> = pairs.iter().map(|p| p.article).collect();
    articles.sort_unstable();
    articles.dedup();
    if articles.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "retriever training needs at least 2 articles with pairs, got {}",
            articles.len()
        )));
    }
    let mut model = RetrieverModel::new(config, seed)?;
    model.vocab_fingerprint = Some(vocab.fingerprint());
    let sents = encode_kb(kb, vocab, model.config.max_len);
    let root = Rng::new(seed);
    let mut split_rng = root.fork("heldout-split");
    let mut train_of = vec![Vec::new(); kb.len()];
    let mut held_of = vec![Vec::new(); kb.len()];
    let mut heldout = Vec::new();
    for p in pairs {
        if p.article >= kb.len() || p.token_index >= sents[p.article].len() {
            return Err(Error::DegenerateInput(format!(
                "pair ({}, {}) outside the knowledge base",
                p.article, p.token_index
            )));
        }
        if split_rng.uniform() < train.heldout_fraction {
            held_of[p.article].push(p.token_index);
            heldout.push(*p);
        } else {
            train_of[p.article].push(p.token_index);
        }
    }
    let n_held: usize = held_of.iter().map(Vec::len).sum();
    let mut shuffle_rng = root.fork("shuffle");
    let mut neg_rng = root.fork("negatives");
    let mut drop_rng = root.fork("dropout");
    let mut adam = AdamState::new(&model.store);
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    let mut epochs = Vec::new();
    let mut stale = 0;
    let mut step = 0u64;
    for epoch in 1..=train.max_epochs {
        let mut order = articles.clone();
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0;
        for batch in batches(&order, train.articles_per_batch) {
            let grads = {
                let mut g = Graph::new(&model.store);
                let mut drop = Dropout::train(model.config.dropout, &mut drop_rng);
                let Some(loss) = batch_loss(&model, &mut g, &batch, &train_of, &sents, &mut drop, train.negatives, &mut neg_rng)? else {
                    continue;
                };
                total += g.value(loss).item() as f64;
                count += 1;
                g.backward(loss)?
            };
            step += 1;
            adam_step(&mut model.store, &grads, &mut adam, train.schedule.lr_at(step))?;
        }
        let train_loss = if count > 0 { total / count as f64 } else { 0.0 };
        let heldout_loss = if n_held > 0 {
            let mut rng = root.fork("heldout-negatives");
            let mut sum = 0.0;
            let mut n = 0;
            for batch in batches(&articles, train.articles_per_batch) {
                let mut g = Graph::new(&model.store);
                if let Some(l) = batch_loss(&model, &mut g, &batch, &held_of, &sents, &mut Dropout::eval(), train.negatives, &mut rng)? {
                    sum += g.value(l).item() as f64;
                    n += 1;
                }
            }
            Some(if n > 0 { sum / n as f64 } else { 0.0 })
        } else {
            None
        };
        let rec = RetrieverEpoch {
            epoch,
            train_loss,
            heldout_loss,
        };
        on_epoch(&rec);
        epochs.push(rec);
        let monitored = heldout_loss.unwrap_or(train_loss);
        if monitored < best.0 {
            best = (monitored, epoch, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= train.patience {
                break;
            }
        }
    }
    model.store = best.2;
    let report = RetrieverTrainReport {
        epochs,
        best_epoch: best.1,
        train_pairs: pairs.len() - n_held,
        heldout,
    };
    Ok((model, report))
}
