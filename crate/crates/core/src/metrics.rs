//! Automatic evaluation of generated responses.
//!
//! Token-list metrics take the output of [`tokenize`]; string metrics
//! tokenize internally. Corpus-level sums run in input order, so results do
//! not depend on thread count.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, KnowledgeBase, StopwordList};
use crate::error::{Error, Result};
use crate::retriever::AlignmentRecord;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> impl Iterator<Item = Vec<&str>> + '_ {
    let len = if n == 0 { 0 } else { tokens.len().saturating_sub(n - 1) };
    (0..len).map(move |i| tokens[i..i + n].iter().map(AsRef::as_ref).collect())
}

/// Distinct n-grams over all responses divided by total n-grams; 0 when
/// there are none.
pub fn distinct_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> f64 {
    let mut seen = BTreeSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            total += 1;
            seen.insert(g);
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

fn check_pairs<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            hyp: hyps.len(),
            reference: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

/// Pooled clipped n-gram counts (n = 1..4) and corpus lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matched: [usize; 4],
    pub total: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precision(&self, n: usize) -> f64 {
        let i = n - 1;
        if self.total[i] == 0 {
            0.0
        } else {
            self.matched[i] as f64 / self.total[i] as f64
        }
    }

    /// Geometric mean of the four precisions times the brevity penalty, on
    /// a 0-100 scale. Unsmoothed: any zero precision gives 0.
    pub fn score(&self) -> f64 {
        if (0..4).any(|i| self.matched[i] == 0 || self.total[i] == 0) {
            return 0.0;
        }
        let log_p: f64 = (1..=4).map(|n| self.precision(n).ln()).sum::<f64>() / 4.0;
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * log_p.exp()
    }
}

pub fn bleu_stats<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuStats> {
    check_pairs(hyps, refs)?;
    let mut st = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        st.hyp_len += h.len();
        st.ref_len += r.len();
        for n in 1..=4 {
            let mut ref_counts: HashMap<Vec<&str>, usize> = HashMap::new();
            for g in ngrams(r, n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<Vec<&str>, usize> = HashMap::new();
            for g in ngrams(h, n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            for (g, c) in hyp_counts {
                st.matched[n - 1] += c.min(ref_counts.get(&g).copied().unwrap_or(0));
                st.total[n - 1] += c;
            }
        }
    }
    Ok(st)
}

/// Corpus BLEU-4: clipped counts are pooled over the corpus before taking
/// ratios, with the brevity penalty on pooled lengths.
pub fn bleu4<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs)?.score())
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F1 of one pair (β = 1). Two empty sequences count as identical.
pub fn rouge_l_pair<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean per-pair ROUGE-L F1.
pub fn rouge_l<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let sum: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_l_pair(h, r)).sum();
    Ok(sum / hyps.len() as f64)
}

const SAFE_PHRASES: &[&str] = &["i'm not sure", "i don't know"];

/// Lowercase and fold typographic apostrophes to ASCII.
pub fn normalize_apostrophes(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| match c {
            '\u{2019}' | '\u{2018}' | '\u{02bc}' | '`' | '\u{00b4}' => '\'',
            c => c,
        })
        .collect()
}

pub fn is_safe_response(response: &str) -> bool {
    let r = normalize_apostrophes(response);
    SAFE_PHRASES.iter().any(|p| r.contains(p))
}

/// Share of responses containing a non-committal phrase.
pub fn safe_rate<S: AsRef<str>>(responses: &[S]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = responses.iter().filter(|r| is_safe_response(r.as_ref())).count();
    Ok(hits as f64 / responses.len() as f64)
}

/// Unigram F1 with clipped multiset counts.
pub fn unigram_f1<S: AsRef<str>>(response: &[S], knowledge: &[S]) -> f64 {
    if response.is_empty() || knowledge.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in knowledge {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in response {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / response.len() as f64;
    let r = overlap as f64 / knowledge.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean unigram F1 between each response and its grounded knowledge; pairs
/// without knowledge are skipped.
pub fn wiki_f1<S: AsRef<str>, K: AsRef<str>>(responses: &[S], knowledge: &[Option<K>]) -> Result<f64> {
    if responses.len() != knowledge.len() {
        return Err(Error::LengthMismatch {
            hyp: responses.len(),
            reference: knowledge.len(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, k) in responses.iter().zip(knowledge) {
        if let Some(k) = k {
            sum += unigram_f1(&tokenize(r.as_ref()), &tokenize(k.as_ref()));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoKnowledge);
    }
    Ok(sum / n as f64)
}

/// Mean number of tokens per response that name a single-token KB title.
pub fn entity_score<S: AsRef<str>>(responses: &[Vec<S>], kb: &KnowledgeBase) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let hits: usize = responses
        .iter()
        .map(|r| r.iter().filter(|t| kb.title_match(&t.as_ref().to_lowercase()).is_some()).count())
        .sum();
    hits as f64 / responses.len() as f64
}

/// Share of non-stopword gold-response tokens found in the knowledge mined
/// for the utterance, averaged over examples with at least one such token.
pub fn knowledge_coverage<S: AsRef<str>>(
    gold: &[Vec<S>],
    alignments: &[AlignmentRecord],
    kb: &KnowledgeBase,
    stopwords: &StopwordList,
) -> f64 {
    let mut mined: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in alignments {
        mined.entry(r.example_id).or_default().insert(r.knowledge_id);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e, g) in gold.iter().enumerate() {
        let content: Vec<&str> = g.iter().map(AsRef::as_ref).filter(|t| !stopwords.contains(t)).collect();
        if content.is_empty() {
            continue;
        }
        let union: BTreeSet<String> = mined
            .get(&e)
            .into_iter()
            .flatten()
            .filter_map(|&k| kb.get(k))
            .flat_map(|item| tokenize(&item.text))
            .collect();
        let hit = content.iter().filter(|t| union.contains(**t)).count();
        sum += hit as f64 / content.len() as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub sentences_per_sec: f64,
    pub tokens_per_sec: f64,
    pub total_seconds: f64,
}

/// Decode rates from a timed run; durations below 1 µs count as 1 µs.
pub fn throughput(sentences: usize, output_tokens: usize, elapsed: Duration) -> Throughput {
    let secs = elapsed.as_secs_f64().max(1e-6);
    Throughput {
        sentences_per_sec: sentences as f64 / secs,
        tokens_per_sec: output_tokens as f64 / secs,
        total_seconds: secs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ppl: Option<f64>,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub safe_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wiki_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entity_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub knowledge_coverage: Option<f64>,
    pub sentences_per_sec: f64,
    pub tokens_per_sec: f64,
    pub total_seconds: f64,
}

impl EvalReport {
    /// Rates in [0, 1], BLEU in [0, 100], perplexity >= 1, the rest >= 0.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Invariant {
                    line: 0,
                    msg: format!("{name} = {v} outside [0, 1]"),
                })
            }
        };
        unit("rouge_l", self.rouge_l)?;
        unit("distinct1", self.distinct1)?;
        unit("distinct2", self.distinct2)?;
        unit("safe_rate", self.safe_rate)?;
        for (name, v) in [("wiki_f1", self.wiki_f1), ("knowledge_coverage", self.knowledge_coverage)] {
            if let Some(v) = v {
                unit(name, v)?;
            }
        }
        let bad = |msg: String| Err(Error::Invariant { line: 0, msg });
        if !(0.0..=100.0).contains(&self.bleu4) {
            return bad(format!("bleu4 = {} outside [0, 100]", self.bleu4));
        }
        if self.ppl.is_some_and(|p| !(p >= 1.0)) {
            return bad(format!("ppl = {:?} below 1", self.ppl));
        }
        if self.entity_score.is_some_and(|e| !(e >= 0.0)) {
            return bad("entity_score is negative".into());
        }
        if [self.sentences_per_sec, self.tokens_per_sec, self.total_seconds].iter().any(|v| !(*v >= 0.0)) {
            return bad("throughput is negative".into());
        }
        Ok(())
    }
}

/// Inputs for [`evaluate`]; optional parts enable the optional metrics.
pub struct EvalInputs<'a> {
    pub hypotheses: &'a [String],
    pub references: &'a [String],
    pub knowledge: Option<&'a [Option<String>]>,
    pub kb: Option<&'a KnowledgeBase>,
    pub alignments: Option<(&'a [AlignmentRecord], &'a StopwordList)>,
    pub ppl: Option<f64>,
    pub throughput: Throughput,
}

pub fn evaluate(inputs: &EvalInputs) -> Result<EvalReport> {
    let hyp: Vec<Vec<String>> = inputs.hypotheses.iter().map(|s| tokenize(s)).collect();
    let refs: Vec<Vec<String>> = inputs.references.iter().map(|s| tokenize(s)).collect();
    let wiki_f1 = match inputs.knowledge {
        Some(k) => match wiki_f1(inputs.hypotheses, k) {
            Ok(v) => Some(v),
            Err(Error::NoKnowledge) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let report = EvalReport {
        ppl: inputs.ppl,
        bleu4: bleu4(&hyp, &refs)?,
        rouge_l: rouge_l(&hyp, &refs)?,
        distinct1: distinct_n(&hyp, 1),
        distinct2: distinct_n(&hyp, 2),
        safe_rate: safe_rate(inputs.hypotheses)?,
        wiki_f1,
        entity_score: inputs.kb.map(|kb| entity_score(&hyp, kb)),
        knowledge_coverage: match (inputs.alignments, inputs.kb) {
            (Some((al, sw)), Some(kb)) => Some(knowledge_coverage(&refs, al, kb, sw)),
            _ => None,
        },
        sentences_per_sec: inputs.throughput.sentences_per_sec,
        tokens_per_sec: inputs.throughput.tokens_per_sec,
        total_seconds: inputs.throughput.total_seconds,
    };
    report.validate()?;
    Ok(report)
}
