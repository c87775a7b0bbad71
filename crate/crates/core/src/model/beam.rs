use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::EOS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub beam_size: usize,
    /// Maximum number of generated tokens, eos included.
    pub max_len: usize,
    /// Length-normalization exponent; scores are divided by `len^alpha`.
    pub alpha: f32,
    /// Eos is suppressed until this many tokens have been generated.
    pub min_len: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            beam_size: 5,
            max_len: 32,
            alpha: 0.0,
            min_len: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max decode length must be >= 1".into()));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Next-token log-probabilities for a set of prefixes (bos excluded).
pub trait StepScorer {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

fn normalized(score: f64, len: usize, alpha: f32) -> f64 {
    if alpha == 0.0 {
        score
    } else {
        score / (len.max(1) as f64).powf(alpha as f64)
    }
}

/// Beam search. Candidates are ranked by (normalized) cumulative log-prob,
/// ties going to the lower token id and then the lower beam index. Returns
/// the best hypothesis without its eos.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, params: &DecodeParams) -> Result<Vec<usize>> {
    params.validate()?;
    let k = params.beam_size;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<(Hyp, f64)> = Vec::new();
    for step in 0..params.max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let allow_eos = step + 1 > params.min_len;
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (b, (hyp, lp)) in live.iter().zip(&lps).enumerate() {
            for (t, &l) in lp.iter().enumerate() {
                if t == EOS && !allow_eos {
                    continue;
                }
                let s = hyp.score + l as f64;
                cands.push((normalized(s, step + 1, params.alpha), t, b, s));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(k);
        for (rank, &(norm, t, b, s)) in cands.iter().enumerate() {
            if next.len() >= k {
                break;
            }
            if t == EOS {
                if rank < k {
                    finished.push((
                        Hyp {
                            tokens: live[b].tokens.clone(),
                            score: s,
                        },
                        norm,
                    ));
                }
                continue;
            }
            let mut tokens = live[b].tokens.clone();
            tokens.push(t);
            next.push(Hyp { tokens, score: s });
        }
        live = next;
        if finished.len() >= k || live.is_empty() {
            break;
        }
        // Log-probs are non-positive, so without normalization no live beam
        // can overtake the best finished one.
        if params.alpha == 0.0 {
            let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    if finished.is_empty() {
        finished = live
            .into_iter()
            .map(|h| {
                let n = normalized(h.score, h.tokens.len(), params.alpha);
                (h, n)
            })
            .collect();
    }
    let best = finished
        .into_iter()
        .min_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.tokens.cmp(&b.0.tokens))
        })
        .map(|(h, _)| h.tokens)
        .unwrap_or_default();
    Ok(best)
}
