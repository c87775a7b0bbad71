//! Brute-force metric oracles. They share no code with the library's
//! metrics: n-grams are found by linear scans, LCS by enumerating
//! subsequences, overlap by sort-merge.

use lexki::numerics::Rng;

pub fn random_sentence(rng: &mut Rng, max_len: usize) -> Vec<String> {
    let len = rng.below(max_len + 1);
    (0..len).map(|_| ["a", "b", "c", "d"][rng.below(4)].to_string()).collect()
}

/// Clipped matches and totals for n-grams, by linear scans over windows.
pub fn oracle_counts(h: &[String], r: &[String], n: usize) -> (usize, usize) {
    if h.len() < n {
        return (0, 0);
    }
    let hyp: Vec<&[String]> = h.windows(n).collect();
    let refs: Vec<&[String]> = if r.len() >= n { r.windows(n).collect() } else { Vec::new() };
    let mut done: Vec<&[String]> = Vec::new();
    let mut matched = 0;
    for g in &hyp {
        if done.contains(g) {
            continue;
        }
        done.push(g);
        let in_hyp = hyp.iter().filter(|x| *x == g).count();
        let in_ref = refs.iter().filter(|x| *x == g).count();
        matched += in_hyp.min(in_ref);
    }
    (matched, hyp.len())
}

pub fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut prod = 1.0f64;
    for n in 1..=4 {
        let (mut m, mut t) = (0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let (a, b) = oracle_counts(h, r, n);
            m += a;
            t += b;
        }
        if m == 0 {
            return 0.0;
        }
        prod *= m as f64 / t as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * prod.powf(0.25)
}

pub fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        total += if h.is_empty() && r.is_empty() {
            1.0
        } else {
            let l = brute_lcs(h, r) as f64;
            if l == 0.0 {
                0.0
            } else {
                let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
                2.0 * p * rc / (p + rc)
            }
        };
    }
    total / hyps.len() as f64
}

pub fn oracle_distinct(resps: &[Vec<String>], n: usize) -> f64 {
    let mut all: Vec<String> = Vec::new();
    for r in resps {
        if r.len() >= n {
            for w in r.windows(n) {
                all.push(w.join("\u{1}"));
            }
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    let mut uniq: Vec<&String> = Vec::new();
    for g in &all {
        if !uniq.contains(&g) {
            uniq.push(g);
        }
    }
    uniq.len() as f64 / all.len() as f64
}

/// Multiset overlap by sorting both sides and merging.
pub fn oracle_f1(r: &[String], k: &[String]) -> f64 {
    let mut a = r.to_vec();
    let mut b = k.to_vec();
    a.sort();
    b.sort();
    let (mut i, mut j, mut o) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => {
                o += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    if o == 0 {
        return 0.0;
    }
    let p = o as f64 / a.len() as f64;
    let rc = o as f64 / b.len() as f64;
    2.0 * p * rc / (p + rc)
}

pub fn oracle_safe(resps: &[String]) -> f64 {
    let hits = resps
        .iter()
        .filter(|r| {
            let folded: String = r.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
            folded.contains("i'm not sure") || folded.contains("i don't know")
        })
        .count();
    hits as f64 / resps.len() as f64
}

pub fn random_corpus(rng: &mut Rng) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let n = 1 + rng.below(4);
    let hyps = (0..n).map(|_| random_sentence(rng, 8)).collect();
    let refs = (0..n).map(|_| random_sentence(rng, 8)).collect();
    (hyps, refs)
}
