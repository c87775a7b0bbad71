use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::Dropout;
use super::seq2seq::{prepare, DialogModel, Prepared};
use crate::corpus::{DialogExample, KnowledgeBase, Vocabulary};
use crate::error::{Error, Result};
use super::layers::segments;
use crate::ki::{build_ki_batch, joint_loss, knowledge_token_ids, KiBatch, KiConfig, UtteranceAlignments};
use crate::numerics::{adam_step, AdamState, Graph, LrSchedule, Rng, Var};
use crate::retriever::AlignmentRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Upper bound on source plus target tokens per batch.
    pub token_budget: usize,
    pub schedule: LrSchedule,
    /// Stop after this many updates even mid-epoch.
    pub max_steps: Option<u64>,
    /// Return the parameters of the best validation epoch; otherwise the
    /// final ones.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            patience: 10,
            token_budget: 512,
            schedule: LrSchedule::default(),
            max_steps: None,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            token_budget: 4096,
            schedule: LrSchedule {
                warmup_steps: 4000,
                ..LrSchedule::default()
            },
            ..Self::default()
        }
    }
}

/// Greedy packing in the given order: a batch grows until the next pair
/// would exceed `budget` tokens. A pair larger than the budget goes alone.
pub fn pack_order(order: &[usize], data: &[Prepared], budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for &i in order {
        let n = data[i].num_tokens();
        if !cur.is_empty() && used + n > budget {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn pack_batches(data: &[Prepared], budget: usize) -> Vec<Vec<usize>> {
    let order: Vec<usize> = (0..data.len()).collect();
    pack_order(&order, data, budget)
}

/// Knowledge side of the joint objective. `config.lambda` is replaced by
/// the `lambda` passed to [`train_dialog`].
pub struct KiInputs<'a> {
    pub config: KiConfig,
    pub kb: &'a KnowledgeBase,
    /// Records whose `example_id` indexes the training set.
    pub alignments: &'a [AlignmentRecord],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f32,
    pub nll: f32,
    pub ki: Option<f32>,
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub train_ki: Option<f64>,
    pub valid_nll: f64,
    pub steps: u64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation NLL.
    pub model: DialogModel,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// KI positives dropped for lack of an in-batch negative.
    pub skipped_negatives: usize,
}

fn index_alignments(
    records: &[AlignmentRecord],
    data: &[Prepared],
    kb_len: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let mut out = vec![Vec::new(); data.len()];
    for (n, r) in records.iter().enumerate() {
        let p = data.get(r.example_id).ok_or_else(|| Error::Invariant {
            line: n + 1,
            msg: format!("alignment refers to example {} of {}", r.example_id, data.len()),
        })?;
        if r.token_index >= p.utt_len || r.knowledge_id >= kb_len {
            return Err(Error::Invariant {
                line: n + 1,
                msg: format!(
                    "alignment ({}, {}, {}) out of range",
                    r.example_id, r.token_index, r.knowledge_id
                ),
            });
        }
        out[r.example_id].push((r.token_index, r.knowledge_id));
    }
    Ok(out)
}

/// Graph nodes of the joint objective for one batch.
///
/// `nll` is the mean over target tokens of the batch, `ki` the hinge summed
/// over KI items, and `loss = nll + λ·ki`.
pub struct Objective {
    pub nll: Var,
    /// Absent when the model has no KI head or the batch has no KI items.
    pub ki: Option<Var>,
    pub loss: Var,
}

/// KI items of a packed batch. `aligned[i]` holds the (token index,
/// knowledge id) pairs of `batch[i]`'s utterance.
pub fn batch_ki_items(batch: &[&Prepared], aligned: &[&[(usize, usize)]], negatives: usize, rng: &mut Rng) -> KiBatch {
    let segs = segments(batch.iter().map(|p| p.src.len()));
    let utts: Vec<UtteranceAlignments> = batch
        .iter()
        .zip(&segs)
        .zip(aligned)
        .map(|((p, seg), al)| UtteranceAlignments {
            row_offset: seg.start + p.utt_offset,
            aligned: al.to_vec(),
        })
        .collect();
    build_ki_batch(&utts, negatives, rng)
}

/// L_NLL + λ·L_KI for one batch. `ki` carries the batch's KI items and the
/// token ids of every knowledge item; it is ignored when the model has no
/// KI head.
pub fn batch_objective(
    model: &DialogModel,
    g: &mut Graph,
    batch: &[&Prepared],
    ki: Option<(&KiBatch, &[Vec<usize>])>,
    lambda: f32,
    drop: &mut Dropout,
) -> Result<Objective> {
    let f = model.forward_batch(g, batch, drop)?;
    let ki_sum = match (model.ki(), ki) {
        (Some(head), Some((kb, know))) => head.batch_loss(g, f.memory, kb, &|k| know[k].clone(), drop)?,
        _ => None,
    };
    let loss = match ki_sum {
        Some(kl) => {
            let scaled = g.scale(kl, lambda)?;
            g.add(f.nll, scaled)?
        }
        None => f.nll,
    };
    Ok(Objective {
        nll: f.nll,
        ki: ki_sum,
        loss,
    })
}

/// Minimize L_NLL + λ·L_KI with Adam and the warmup schedule, keeping the
/// parameters with the best validation NLL.
///
/// Initialization, dropout, shuffling and negative sampling each draw from
/// their own stream forked from `seed`, so the dialog parameters and the
/// first batch are identical whether or not KI is enabled.
pub fn train_dialog(
    train: &[DialogExample],
    valid: &[DialogExample],
    vocab: &Vocabulary,
    config: ModelConfig,
    ki: Option<KiInputs>,
    lambda: f32,
    tc: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda > 0.0 && ki.is_none() {
        return Err(Error::MissingAlignments);
    }
    let ki = ki.filter(|_| lambda > 0.0).map(|mut k| {
        k.config.lambda = lambda;
        k
    });
    let mut model = match &ki {
        Some(k) => DialogModel::with_ki(config, k.config.clone(), seed)?,
        None => DialogModel::new(config, seed)?,
    };
    model.vocab_fingerprint = Some(vocab.fingerprint());
    let max_len = model.config.max_len;
    let data = train.iter().map(|e| prepare(e, vocab, max_len)).collect::<Result<Vec<_>>>()?;
    let valid_data = valid.iter().map(|e| prepare(e, vocab, max_len)).collect::<Result<Vec<_>>>()?;
    let (aligned, know) = match &ki {
        Some(k) => (
            index_alignments(k.alignments, &data, k.kb.len())?,
            knowledge_token_ids(k.kb, vocab, max_len),
        ),
        None => (Vec::new(), Vec::new()),
    };

    let root = Rng::new(seed);
    let mut shuffle_rng = root.fork("shuffle");
    let mut drop_rng = root.fork("dropout");
    let mut neg_rng = root.fork("negatives");
    let mut adam = AdamState::new(&model.store);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::numerics::ParamStore)> = None;
    let mut stale = 0;
    let mut step = 0u64;
    let mut skipped = 0;
    let p_drop = model.config.dropout;

    'epochs: for epoch in 1..=tc.max_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let (mut nll_sum, mut ki_sum, mut nb, mut nk) = (0.0f64, 0.0f64, 0usize, 0usize);
        for batch in pack_order(&order, &data, tc.token_budget) {
            if tc.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let refs: Vec<&Prepared> = batch.iter().map(|&i| &data[i]).collect();
            let (grads, log) = {
                let mut g = Graph::new(&model.store);
                let mut drop = Dropout::train(p_drop, &mut drop_rng);
                let kb = model.ki().map(|head| {
                    let al: Vec<&[(usize, usize)]> = batch.iter().map(|&i| aligned[i].as_slice()).collect();
                    batch_ki_items(&refs, &al, head.config().negatives, &mut neg_rng)
                });
                if let Some(kb) = &kb {
                    skipped += kb.skipped;
                }
                let obj = batch_objective(&model, &mut g, &refs, kb.as_ref().map(|b| (b, know.as_slice())), lambda, &mut drop)?;
                let nll = g.value(obj.nll).item();
                let ki_val = obj.ki.map(|k| g.value(k).item());
                let total = g.value(obj.loss).item();
                let grads = g.backward(obj.loss)?;
                (grads, (nll, ki_val, total))
            };
            step += 1;
            let lr = tc.schedule.lr_at(step);
            adam_step(&mut model.store, &grads, &mut adam, lr)?;
            let (nll, ki_val, total) = log;
            nll_sum += nll as f64;
            nb += 1;
            if let Some(k) = ki_val {
                ki_sum += k as f64;
                nk += 1;
            }
            steps.push(StepLog {
                step,
                epoch,
                lr,
                nll,
                ki: ki_val,
                loss: total,
            });
        }
        if nb == 0 {
            break 'epochs;
        }
        let train_nll = nll_sum / nb as f64;
        let valid_nll = if valid_data.is_empty() {
            train_nll
        } else {
            let (s, c) = model.nll_totals(&valid_data, tc.token_budget)?;
            s / c as f64
        };
        let log = EpochLog {
            epoch,
            train_nll,
            train_ki: (nk > 0).then(|| ki_sum / nk as f64),
            valid_nll,
            steps: step,
        };
        on_epoch(&log);
        epochs.push(log);
        if best.as_ref().map_or(true, |b| valid_nll < b.0) {
            best = Some((valid_nll, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
        if tc.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            if tc.keep_best {
                model.store = store;
            }
            e
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        steps,
        epochs,
        best_epoch,
        skipped_negatives: skipped,
    })
}

/// `joint_loss` restated for logged values.
pub fn step_decomposes(log: &StepLog, lambda: f32) -> bool {
    let expect = joint_loss(log.nll as f64, log.ki.unwrap_or(0.0) as f64, lambda as f64);
    (expect - log.loss as f64).abs() <= 1e-5 * expect.abs().max(1.0)
}
