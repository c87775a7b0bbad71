use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{encode_kb, RetrieverModel};
use crate::corpus::{tokenize, DialogExample, KnowledgeBase, StopwordList, Vocabulary};
use crate::error::{Error, Result};
use crate::model::layers::Dropout;
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSource {
    Retrieved,
    ExactMatch,
}

/// A token of a dialog utterance aligned to a knowledge item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentRecord {
    pub example_id: usize,
    pub token_index: usize,
    pub knowledge_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
    pub source: AlignmentSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningStrategies {
    pub stopword_masking: bool,
    pub exact_matching: bool,
}

impl Default for MiningStrategies {
    fn default() -> Self {
        MiningStrategies {
            stopword_masking: true,
            exact_matching: true,
        }
    }
}

/// Projected, unit-norm knowledge embeddings; row `i` is knowledge id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeIndex {
    rows: Tensor,
}

impl KnowledgeIndex {
    pub fn from_rows(rows: Tensor) -> Self {
        KnowledgeIndex { rows }
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Highest inner product with `q`; ties go to the lowest id.
    pub fn argmax(&self, q: &[f32]) -> Option<(usize, f32)> {
        let mut best: Option<(usize, f32)> = None;
        for i in 0..self.len() {
            let row = self.rows.row_slice(i);
            let mut s = 0.0f32;
            for (a, b) in row.iter().zip(q) {
                s += a * b;
            }
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best
    }
}

const INDEX_CHUNK: usize = 64;

pub fn build_index(model: &RetrieverModel, kb: &KnowledgeBase, vocab: &Vocabulary) -> Result<KnowledgeIndex> {
    let sents = encode_kb(kb, vocab, model.config.max_len);
    let mut data = Vec::with_capacity(sents.len() * model.config.d_proj);
    for chunk in sents.chunks(INDEX_CHUNK) {
        let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new(&model.store);
        let v = model.knowledge_rows(&mut g, &refs, &mut Dropout::eval())?;
        data.extend_from_slice(g.value(v).data());
    }
    Ok(KnowledgeIndex {
        rows: Tensor::new(vec![sents.len(), model.config.d_proj], data)?,
    })
}

/// Alignment of one utterance token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenAlignment {
    pub token_index: usize,
    pub knowledge_id: usize,
    pub score: Option<f32>,
    pub source: AlignmentSource,
}

/// Align each token of an utterance: stopwords get nothing, title tokens
/// take their article, everything else takes the best-scoring item.
pub fn mine(
    model: &RetrieverModel,
    index: &KnowledgeIndex,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    tokens: &[String],
    strategies: MiningStrategies,
    stopwords: &StopwordList,
) -> Result<Vec<TokenAlignment>> {
    let mut out = Vec::new();
    let mut pending = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if strategies.stopword_masking && stopwords.contains(t) {
            continue;
        }
        if strategies.exact_matching {
            if let Some(k) = kb.title_match(t) {
                out.push(TokenAlignment {
                    token_index: i,
                    knowledge_id: k,
                    score: None,
                    source: AlignmentSource::ExactMatch,
                });
                continue;
            }
        }
        pending.push(i);
    }
    if !pending.is_empty() && !index.is_empty() {
        let ids = vocab.encode(tokens);
        let window = model.config.max_len;
        let mut g = Graph::new(&model.store);
        for (w, chunk) in ids.chunks(window).enumerate() {
            let base = w * window;
            let wanted: Vec<usize> = pending.iter().copied().filter(|&i| i >= base && i < base + chunk.len()).collect();
            if wanted.is_empty() {
                continue;
            }
            let rows = model.context_rows(&mut g, &[chunk], &mut Dropout::eval())?;
            let t = g.value(rows).clone();
            for i in wanted {
                if let Some((k, s)) = index.argmax(t.row_slice(i - base)) {
                    out.push(TokenAlignment {
                        token_index: i,
                        knowledge_id: k,
                        score: Some(s),
                        source: AlignmentSource::Retrieved,
                    });
                }
            }
        }
    }
    out.sort_by_key(|a| a.token_index);
    Ok(out)
}

/// Mine every utterance of a corpus; records ordered by (example, token).
pub fn mine_corpus(
    model: &RetrieverModel,
    index: &KnowledgeIndex,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    examples: &[DialogExample],
    strategies: MiningStrategies,
    stopwords: &StopwordList,
) -> Result<Vec<AlignmentRecord>> {
    let mut out = Vec::new();
    for (e, ex) in examples.iter().enumerate() {
        let toks = tokenize(&ex.utterance);
        for a in mine(model, index, kb, vocab, &toks, strategies, stopwords)? {
            out.push(AlignmentRecord {
                example_id: e,
                token_index: a.token_index,
                knowledge_id: a.knowledge_id,
                score: a.score,
                source: a.source,
            });
        }
    }
    Ok(out)
}

/// Average number of distinct knowledge items per token type and per
/// utterance (over utterances that have at least one record).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStats {
    pub per_token_type: f64,
    pub per_sentence: f64,
    pub token_types: usize,
    pub sentences: usize,
}

pub fn coverage_stats(records: &[AlignmentRecord], examples: &[DialogExample]) -> Result<CoverageStats> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no alignment records".into()));
    }
    let mut by_type: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut by_sent: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut cache: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for r in records {
        let ex = examples.get(r.example_id).ok_or_else(|| Error::Invariant {
            line: r.example_id + 1,
            msg: format!("alignment refers to missing example {}", r.example_id),
        })?;
        let toks = cache.entry(r.example_id).or_insert_with(|| tokenize(&ex.utterance));
        let tok = toks.get(r.token_index).ok_or_else(|| Error::Invariant {
            line: r.example_id + 1,
            msg: format!("token index {} out of range", r.token_index),
        })?;
        by_type.entry(tok.clone()).or_default().insert(r.knowledge_id);
        by_sent.entry(r.example_id).or_default().insert(r.knowledge_id);
    }
    let mean = |sizes: Vec<usize>| sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    Ok(CoverageStats {
        per_token_type: mean(by_type.values().map(BTreeSet::len).collect()),
        per_sentence: mean(by_sent.values().map(BTreeSet::len).collect()),
        token_types: by_type.len(),
        sentences: by_sent.len(),
    })
}

pub fn parse_alignment_line(line: &str, line_no: usize) -> Result<AlignmentRecord> {
    let r: AlignmentRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    match (r.source, r.score) {
        (AlignmentSource::ExactMatch, Some(_)) => Err(Error::Invariant {
            line: line_no,
            msg: "exact_match records carry no score".into(),
        }),
        (_, Some(s)) if !s.is_finite() => Err(Error::Invariant {
            line: line_no,
            msg: "score is not finite".into(),
        }),
        _ => Ok(r),
    }
}

pub fn parse_alignments(text: &str) -> Result<Vec<AlignmentRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_alignment_line(l, n + 1))
        .collect()
}

pub fn load_alignments(path: &Path) -> Result<Vec<AlignmentRecord>> {
    parse_alignments(&std::fs::read_to_string(path)?)
}

pub fn alignments_to_jsonl(records: &[AlignmentRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("alignment records serialize"));
        out.push('\n');
    }
    out
}
