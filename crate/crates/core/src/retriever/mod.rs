//! Weakly supervised token-level knowledge retriever.
//!
//! Every token of an article's first sentence is paired with that sentence.
//! A context encoder reads the sentence and yields one row per token, a
//! knowledge encoder mean-pools the sentence, and both are projected into a
//! shared unit sphere where relevance is the inner product.

mod mining;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, KnowledgeBase, StopwordList, Vocabulary};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, CheckpointHeader};
use crate::model::layers::{embed_tokens, segments, Dropout, EncoderStack, Linear};
use crate::numerics::{init, Graph, ParamId, ParamStore, Rng, Var};

pub use mining::{
    alignments_to_jsonl, build_index, coverage_stats, load_alignments, mine, mine_corpus,
    parse_alignment_line, parse_alignments, AlignmentRecord, AlignmentSource, CoverageStats, KnowledgeIndex,
    MiningStrategies, TokenAlignment,
};
pub use train::{build_weak_supervision, train_retriever, RetrieverTrainConfig, RetrieverTrainReport, WeakPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    /// Width of the shared scoring space.
    pub d_proj: usize,
    /// One projection for both sides instead of one per side.
    pub shared_projection: bool,
    pub margin: f32,
    pub dropout: f32,
}

impl RetrieverConfig {
    pub fn desk(vocab_size: usize) -> Self {
        RetrieverConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 128,
            max_len: 64,
            d_proj: 64,
            shared_projection: false,
            margin: 0.2,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 || self.d_model == 0 || self.d_proj == 0 || self.d_ffn == 0 {
            return Err(Error::Config("retriever dimensions must be positive (vocab >= 5)".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "retriever d_model {} must be a multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("retriever max_len must be >= 2".into()));
        }
        if !(self.margin > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("retriever margin must be > 0 and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Side {
    embed: ParamId,
    encoder: EncoderStack,
    proj: Linear,
}

/// Dual encoder scoring r(s_i | S, K).
#[derive(Debug, Clone)]
pub struct RetrieverModel {
    pub config: RetrieverConfig,
    pub store: ParamStore,
    ctx: Side,
    kn: Side,
    pub vocab_fingerprint: Option<String>,
}

impl RetrieverModel {
    pub fn new(config: RetrieverConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).fork("retriever-init");
        let mut store = ParamStore::new();
        let c = &config;
        let std = (c.d_model as f32).powf(-0.5);
        let ctx_embed = store.add("ctx/embed", init::normal(&[c.vocab_size, c.d_model], std, &mut rng))?;
        let ctx_enc = EncoderStack::new(&mut store, "ctx/enc", c.n_layers, c.d_model, c.n_heads, c.d_ffn, &mut rng)?;
        let kn_embed = store.add("kn/embed", init::normal(&[c.vocab_size, c.d_model], std, &mut rng))?;
        let kn_enc = EncoderStack::new(&mut store, "kn/enc", c.n_layers, c.d_model, c.n_heads, c.d_ffn, &mut rng)?;
        let (ctx_proj, kn_proj) = if c.shared_projection {
            let p = Linear::new(&mut store, "proj", c.d_model, c.d_proj, &mut rng)?;
            (p.clone(), p)
        } else {
            (
                Linear::new(&mut store, "proj/ctx", c.d_model, c.d_proj, &mut rng)?,
                Linear::new(&mut store, "proj/kn", c.d_model, c.d_proj, &mut rng)?,
            )
        };
        Ok(RetrieverModel {
            config,
            store,
            ctx: Side {
                embed: ctx_embed,
                encoder: ctx_enc,
                proj: ctx_proj,
            },
            kn: Side {
                embed: kn_embed,
                encoder: kn_enc,
                proj: kn_proj,
            },
            vocab_fingerprint: None,
        })
    }

    fn check(&self, seqs: &[&[usize]]) -> Result<()> {
        for s in seqs {
            if s.is_empty() {
                return Err(Error::DegenerateInput("empty sequence".into()));
            }
            if s.len() > self.config.max_len {
                return Err(Error::TooLong {
                    len: s.len(),
                    max: self.config.max_len,
                });
            }
        }
        Ok(())
    }

    /// Unit-norm projected rows, one per token of each context sentence.
    pub fn context_rows(&self, g: &mut Graph, sents: &[&[usize]], drop: &mut Dropout) -> Result<Var> {
        self.check(sents)?;
        let segs = segments(sents.iter().map(|s| s.len()));
        let ids: Vec<usize> = sents.iter().flat_map(|s| s.iter().copied()).collect();
        let x = embed_tokens(g, self.ctx.embed, &ids, &segs, true)?;
        let x = drop.apply(g, x)?;
        let h = self.ctx.encoder.forward(g, x, &segs, drop)?;
        let p = self.ctx.proj.forward(g, h)?;
        g.l2_normalize(p)
    }

    /// Unit-norm projected g(K), one row per knowledge sentence.
    pub fn knowledge_rows(&self, g: &mut Graph, ks: &[&[usize]], drop: &mut Dropout) -> Result<Var> {
        self.check(ks)?;
        let segs = segments(ks.iter().map(|s| s.len()));
        let ids: Vec<usize> = ks.iter().flat_map(|s| s.iter().copied()).collect();
        let x = embed_tokens(g, self.kn.embed, &ids, &segs, true)?;
        let x = drop.apply(g, x)?;
        let h = self.kn.encoder.forward(g, x, &segs, drop)?;
        let pooled = g.mean_pool(h, &segs)?;
        let p = self.kn.proj.forward(g, pooled)?;
        g.l2_normalize(p)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            CheckpointHeader::Retriever {
                retriever: self.config.clone(),
                vocab: self.vocab_fingerprint.clone(),
            },
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let CheckpointHeader::Retriever { retriever, vocab } = &ck.header else {
            return Err(Error::Checkpoint("not a retriever checkpoint".into()));
        };
        let mut m = RetrieverModel::new(retriever.clone(), 0)?;
        ck.restore_into(&mut m.store)?;
        m.vocab_fingerprint = vocab.clone();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Tokenized knowledge sentences in retriever id space, truncated to
/// `max_len` (an all-unknown sentence keeps a single unk).
pub fn encode_kb(kb: &KnowledgeBase, vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    crate::ki::knowledge_token_ids(kb, vocab, max_len)
}

/// Token positions of a sentence that carry alignments under masking.
pub fn content_positions(tokens: &[String], stopwords: Option<&StopwordList>) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| stopwords.map_or(true, |s| !s.contains(t)))
        .map(|(i, _)| i)
        .collect()
}

/// Tokens of a knowledge sentence as the retriever sees them.
pub fn sentence_tokens(text: &str, max_len: usize) -> Vec<String> {
    let mut t = tokenize(text);
    t.truncate(max_len);
    t
}
