//! ROUGE, extractive-fragment statistics and the Lead-3 baseline.
//!
//! All functions work on token slices exactly as produced by the model,
//! anonymization tags included.

use std::collections::{HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("n must be 1 or 2, got {0}")]
    UnsupportedN(usize),
    #[error("summary is empty")]
    EmptySummary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }

    fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self::from_pr(ratio(overlap, cand), ratio(overlap, reference))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RougeSet {
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rl: RougeScore,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap, n in {1, 2}.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Result<RougeScore, EvalError> {
    if !(1..=2).contains(&n) {
        return Err(EvalError::UnsupportedN(n));
    }
    if reference.is_empty() {
        log::warn!("rouge-{n} against an empty reference scores zero");
        return Ok(RougeScore::default());
    }
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Ok(RougeScore::from_counts(
        overlap,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    ))
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::default();
    }
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

pub fn rouge_all<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeSet {
    RougeSet {
        r1: rouge_n(candidate, reference, 1).expect("n=1 is supported"),
        r2: rouge_n(candidate, reference, 2).expect("n=2 is supported"),
        rl: rouge_l(candidate, reference),
    }
}

/// Component-wise mean; zero for an empty slice.
pub fn mean_rouge(scores: &[RougeSet]) -> RougeSet {
    if scores.is_empty() {
        return RougeSet::default();
    }
    let n = scores.len() as f64;
    let avg = |f: fn(&RougeSet) -> RougeScore| RougeScore {
        precision: scores.iter().map(|s| f(s).precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| f(s).recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| f(s).f1).sum::<f64>() / n,
    };
    RougeSet {
        r1: avg(|s| s.r1),
        r2: avg(|s| s.r2),
        rl: avg(|s| s.rl),
    }
}

/// A summary span copied verbatim from the document.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fragment {
    pub summary_start: usize,
    pub doc_start: usize,
    pub len: usize,
}

/// Greedy partition: at each summary position take the longest span that
/// also occurs in the document (earliest doc position on ties), otherwise
/// skip one token.
pub fn fragments<S: AsRef<str>>(doc: &[S], summary: &[S]) -> Vec<Fragment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < summary.len() {
        let mut best = Fragment { summary_start: i, doc_start: 0, len: 0 };
        for j in 0..doc.len() {
            let len = summary[i..]
                .iter()
                .zip(&doc[j..])
                .take_while(|(a, b)| a.as_ref() == b.as_ref())
                .count();
            if len > best.len {
                best = Fragment { summary_start: i, doc_start: j, len };
            }
        }
        if best.len > 0 {
            out.push(best);
            i += best.len;
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct AbstractnessStats {
    pub coverage: f64,
    pub density: f64,
    pub compression: f64,
    /// Share of summary n-gram occurrences (n = 1..4) absent from the doc;
    /// zero when the summary is shorter than n.
    pub novel: [f64; 4],
}

pub fn novel_ngram_fraction<S: AsRef<str>>(doc: &[S], summary: &[S], n: usize) -> f64 {
    if n == 0 || summary.len() < n {
        return 0.0;
    }
    let seen: HashSet<Vec<&str>> = ngram_counts(doc, n).into_keys().collect();
    let total = summary.len() - n + 1;
    let novel = summary
        .windows(n)
        .filter(|w| !seen.contains(&w.iter().map(AsRef::as_ref).collect::<Vec<_>>()))
        .count();
    novel as f64 / total as f64
}

pub fn abstractness<S: AsRef<str>>(doc: &[S], summary: &[S]) -> Result<AbstractnessStats, EvalError> {
    if summary.is_empty() {
        return Err(EvalError::EmptySummary);
    }
    let frags = fragments(doc, summary);
    let s = summary.len() as f64;
    let mut novel = [0.0; 4];
    for (n, slot) in novel.iter_mut().enumerate() {
        *slot = novel_ngram_fraction(doc, summary, n + 1);
    }
    Ok(AbstractnessStats {
        coverage: frags.iter().map(|f| f.len as f64).sum::<f64>() / s,
        density: frags.iter().map(|f| (f.len * f.len) as f64).sum::<f64>() / s,
        compression: doc.len() as f64 / s,
        novel,
    })
}

pub fn mean_abstractness(stats: &[AbstractnessStats]) -> AbstractnessStats {
    if stats.is_empty() {
        return AbstractnessStats::default();
    }
    let n = stats.len() as f64;
    let mut novel = [0.0; 4];
    for (k, slot) in novel.iter_mut().enumerate() {
        *slot = stats.iter().map(|s| s.novel[k]).sum::<f64>() / n;
    }
    AbstractnessStats {
        coverage: stats.iter().map(|s| s.coverage).sum::<f64>() / n,
        density: stats.iter().map(|s| s.density).sum::<f64>() / n,
        compression: stats.iter().map(|s| s.compression).sum::<f64>() / n,
        novel,
    }
}

pub const SENTENCE_ENDS: [&str; 6] = [".", "!", "?", "。", "！", "？"];

/// Splits after every sentence-final token; a trailing unterminated run is
/// its own sentence.
pub fn split_sentences<S: AsRef<str>>(tokens: &[S]) -> Vec<&[S]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if SENTENCE_ENDS.contains(&t.as_ref()) {
            out.push(&tokens[start..=i]);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(&tokens[start..]);
    }
    out
}

pub fn lead3<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    split_sentences(tokens)
        .into_iter()
        .take(3)
        .flatten()
        .map(|t| t.as_ref().to_string())
        .collect()
}
