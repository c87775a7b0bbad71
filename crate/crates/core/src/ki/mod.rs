//! Knowledge internalization: a contrastive hinge objective that pulls a
//! token's encoder row toward the encoding of the knowledge sentence aligned
//! to it and away from knowledge aligned to other utterances in the batch.

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, KnowledgeBase, Vocabulary};
use crate::error::{Error, Result};
use crate::model::layers::{embed_tokens, segments, Dropout, EncoderStack, Linear};
use crate::model::ModelConfig;
use crate::numerics::{init, Graph, ParamId, ParamStore, Rng, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KiConfig {
    pub lambda: f32,
    pub margin: f32,
    /// Negatives drawn per positive.
    pub negatives: usize,
    /// Width of the shared space f1 and f2 project into.
    pub d_ki: usize,
    /// Transformer layers in the knowledge encoder; with 0 the encoding is
    /// the mean of the (position-free) token embeddings.
    pub encoder_layers: usize,
    /// Reuse the dialog model's embedding table in the knowledge encoder.
    pub share_embeddings: bool,
}

impl Default for KiConfig {
    fn default() -> Self {
        KiConfig {
            lambda: 1.0,
            margin: 0.5,
            negatives: 1,
            d_ki: 64,
            encoder_layers: 0,
            share_embeddings: true,
        }
    }
}

impl KiConfig {
    pub fn paper() -> Self {
        KiConfig {
            d_ki: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.negatives == 0 || self.d_ki == 0 {
            return Err(Error::Config("negatives and d_ki must be positive".into()));
        }
        Ok(())
    }
}

/// Knowledge encoder g and the projections f1 (tokens) and f2 (knowledge).
/// Parameters live under the `ki/` prefix of the dialog model's store.
#[derive(Debug, Clone)]
pub struct KiHead {
    config: KiConfig,
    max_len: usize,
    embed: ParamId,
    encoder: Option<EncoderStack>,
    f1: Linear,
    f2: Linear,
}

impl KiHead {
    pub fn register(
        store: &mut ParamStore,
        model: &ModelConfig,
        dialog_embed: ParamId,
        config: KiConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = model.d_model;
        let embed = if config.share_embeddings {
            dialog_embed
        } else {
            store.add("ki/embed", init::normal(&[model.vocab_size, d], (d as f32).powf(-0.5), rng))?
        };
        let encoder = if config.encoder_layers > 0 {
            Some(EncoderStack::new(store, "ki/enc", config.encoder_layers, d, model.n_heads, model.d_ffn, rng)?)
        } else {
            None
        };
        let f1 = Linear::new(store, "ki/f1", d, config.d_ki, rng)?;
        let f2 = Linear::new(store, "ki/f2", d, config.d_ki, rng)?;
        // f2 starts as a copy of f1, so both sides begin in one shared space
        // and the hinge pulls tokens toward their knowledge in that space
        // rather than being absorbed by two unrelated random maps.
        *store.get_mut(f2.w) = store.get(f1.w).clone();
        Ok(KiHead {
            config,
            max_len: model.max_len,
            embed,
            encoder,
            f1,
            f2,
        })
    }

    pub fn config(&self) -> &KiConfig {
        &self.config
    }

    /// g(K) for each knowledge sequence: mean over the encoder's rows.
    pub fn encode_knowledge_graph(&self, g: &mut Graph, ks: &[&[usize]], drop: &mut Dropout) -> Result<Var> {
        for k in ks {
            if k.is_empty() {
                return Err(Error::DegenerateInput("empty knowledge sequence".into()));
            }
            if k.len() > self.max_len {
                return Err(Error::TooLong {
                    len: k.len(),
                    max: self.max_len,
                });
            }
        }
        let segs = segments(ks.iter().map(|k| k.len()));
        let ids: Vec<usize> = ks.iter().flat_map(|k| k.iter().copied()).collect();
        let x = embed_tokens(g, self.embed, &ids, &segs, self.encoder.is_some())?;
        let h = match &self.encoder {
            Some(enc) => enc.forward(g, x, &segs, drop)?,
            None => x,
        };
        g.mean_pool(h, &segs)
    }

    /// f1(h) normalized to unit length.
    pub fn project_tokens(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let p = self.f1.forward(g, h)?;
        g.l2_normalize(p)
    }

    /// f2(g(K)) normalized to unit length.
    pub fn project_knowledge(&self, g: &mut Graph, gk: Var) -> Result<Var> {
        let p = self.f2.forward(g, gk)?;
        g.l2_normalize(p)
    }

    pub fn encode_knowledge(&self, store: &ParamStore, k: &[usize]) -> Result<Vec<f32>> {
        let mut g = Graph::new(store);
        let v = self.encode_knowledge_graph(&mut g, &[k], &mut Dropout::eval())?;
        Ok(g.value(v).data().to_vec())
    }

    /// s(x_i, K) = f1(h_i)ᵀ f2(g(K)).
    pub fn similarity(&self, store: &ParamStore, h: &[f32], gk: &[f32]) -> Result<f32> {
        let mut g = Graph::new(store);
        let hv = g.constant(crate::numerics::Tensor::row(h.to_vec()))?;
        let kv = g.constant(crate::numerics::Tensor::row(gk.to_vec()))?;
        let a = self.project_tokens(&mut g, hv)?;
        let b = self.project_knowledge(&mut g, kv)?;
        let s = g.row_dot(a, b)?;
        Ok(g.value(s).item())
    }

    /// Summed KI hinge loss for `batch`, given encoder rows `h` of the batch's
    /// sources and the token ids of each knowledge id in `batch.knowledge`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        h: Var,
        batch: &KiBatch,
        knowledge_tokens: &dyn Fn(usize) -> Vec<usize>,
        drop: &mut Dropout,
    ) -> Result<Option<Var>> {
        if batch.items.is_empty() {
            return Ok(None);
        }
        let toks: Vec<Vec<usize>> = batch.knowledge.iter().map(|&k| knowledge_tokens(k)).collect();
        let refs: Vec<&[usize]> = toks.iter().map(Vec::as_slice).collect();
        let gk = self.encode_knowledge_graph(g, &refs, drop)?;
        let kn = self.project_knowledge(g, gk)?;
        let rows: Vec<usize> = batch.items.iter().map(|it| it.row).collect();
        let hv = g.gather_rows(h, &rows)?;
        let tok = self.project_tokens(g, hv)?;
        let items: Vec<KiItem> = batch
            .items
            .iter()
            .enumerate()
            .flat_map(|(i, it)| {
                let pos = batch.slot(it.positive);
                it.negatives.iter().map(move |&n| KiItem {
                    row: i,
                    positive: pos,
                    negative: batch.slot(n),
                })
            })
            .collect();
        Ok(Some(ki_loss_graph(g, tok, kn, &items, self.config.margin)?))
    }
}

/// One hinge term: row `row` of the token projections against rows of the
/// knowledge projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KiItem {
    pub row: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Sum over items of max(0, m − s⁺ + s⁻).
pub fn ki_loss_graph(g: &mut Graph, tok: Var, kn: Var, items: &[KiItem], margin: f32) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::DegenerateInput("no KI items".into()));
    }
    let rows: Vec<usize> = items.iter().map(|i| i.row).collect();
    let pos: Vec<usize> = items.iter().map(|i| i.positive).collect();
    let neg: Vec<usize> = items.iter().map(|i| i.negative).collect();
    let t = g.gather_rows(tok, &rows)?;
    let p = g.gather_rows(kn, &pos)?;
    let n = g.gather_rows(kn, &neg)?;
    let sp = g.row_dot(t, p)?;
    let sn = g.row_dot(t, n)?;
    let diff = g.sub(sn, sp)?;
    let shifted = g.add_scalar(diff, margin)?;
    let h = g.relu(shifted)?;
    g.sum(h)
}

/// max(0, m − s⁺ + s⁻).
pub fn hinge(margin: f64, s_pos: f64, s_neg: f64) -> f64 {
    (margin - s_pos + s_neg).max(0.0)
}

/// Summed hinge over (s⁺, s⁻) pairs; 0 for no pairs.
pub fn ki_loss(margin: f64, pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|&(p, n)| hinge(margin, p, n)).sum()
}

/// L = L_NLL + λ·L_KI.
pub fn joint_loss(nll: f64, ki: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        nll
    } else {
        nll + lambda * ki
    }
}

/// A token with its aligned knowledge and sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KiBatchItem {
    /// Row of the token in the packed source batch.
    pub row: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// KI items for one training batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KiBatch {
    pub items: Vec<KiBatchItem>,
    /// Distinct knowledge ids used by the items, ascending.
    pub knowledge: Vec<usize>,
    /// Positives dropped because no valid negative existed.
    pub skipped: usize,
}

impl KiBatch {
    fn slot(&self, id: usize) -> usize {
        self.knowledge.binary_search(&id).expect("knowledge id registered in batch")
    }
}

/// Uniform draw from `pool` excluding `own` (both ascending).
pub fn sample_negative(pool: &[usize], own: &[usize], rng: &mut Rng) -> Option<usize> {
    let cands: Vec<usize> = pool.iter().copied().filter(|k| own.binary_search(k).is_err()).collect();
    if cands.is_empty() {
        None
    } else {
        Some(cands[rng.below(cands.len())])
    }
}

/// Aligned tokens of one utterance inside a packed batch.
#[derive(Debug, Clone)]
pub struct UtteranceAlignments {
    /// Row of the utterance's first token in the packed sources.
    pub row_offset: usize,
    /// (token index, knowledge id) pairs.
    pub aligned: Vec<(usize, usize)>,
}

/// Pair every aligned token with negatives drawn from knowledge aligned to
/// other utterances of the batch. Tokens with no candidate are skipped.
pub fn build_ki_batch(utts: &[UtteranceAlignments], negatives: usize, rng: &mut Rng) -> KiBatch {
    let mut pool: Vec<usize> = utts.iter().flat_map(|u| u.aligned.iter().map(|a| a.1)).collect();
    pool.sort_unstable();
    pool.dedup();
    let mut items = Vec::new();
    let mut skipped = 0;
    let mut used: Vec<usize> = Vec::new();
    for u in utts {
        let mut own: Vec<usize> = u.aligned.iter().map(|a| a.1).collect();
        own.sort_unstable();
        own.dedup();
        for &(tok, k) in &u.aligned {
            let negs: Option<Vec<usize>> = (0..negatives).map(|_| sample_negative(&pool, &own, rng)).collect();
            match negs {
                Some(negs) => {
                    used.push(k);
                    used.extend(&negs);
                    items.push(KiBatchItem {
                        row: u.row_offset + tok,
                        positive: k,
                        negatives: negs,
                    });
                }
                None => skipped += 1,
            }
        }
    }
    used.sort_unstable();
    used.dedup();
    KiBatch {
        items,
        knowledge: used,
        skipped,
    }
}

/// Dialog-vocabulary ids of every knowledge sentence, truncated to `max_len`.
pub fn knowledge_token_ids(kb: &KnowledgeBase, vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    kb.items()
        .iter()
        .map(|item| {
            let mut ids = vocab.encode(&tokenize(&item.text));
            ids.truncate(max_len);
            if ids.is_empty() {
                ids.push(crate::corpus::UNK);
            }
            ids
        })
        .collect()
}
