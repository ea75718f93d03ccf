//! Recall-oriented overlap scores against one or more references.

use std::collections::HashMap;

use super::TokenSequence;
use crate::error::{Error, Result};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// `Σ min(count_cand, count_ref) / Σ count_ref` over the reference's keys.
fn clipped_recall<K: std::hash::Hash + Eq>(cand: &HashMap<K, usize>, reference: &HashMap<K, usize>) -> f64 {
    let total: usize = reference.values().sum();
    if total == 0 {
        return 0.0;
    }
    let matched: usize = reference
        .iter()
        .map(|(k, &c)| c.min(cand.get(k).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

fn mean_over_references(references: &[TokenSequence], score: impl Fn(&TokenSequence) -> f64) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Usage("at least one reference is required".into()));
    }
    Ok(references.iter().map(score).sum::<f64>() / references.len() as f64)
}

/// ROUGE-N. A reference with fewer than `n` tokens scores 0.
pub fn rouge_n(candidate: &TokenSequence, references: &[TokenSequence], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Usage("ROUGE-N requires n ≥ 1".into()));
    }
    let cand = ngram_counts(candidate, n);
    mean_over_references(references, |r| clipped_recall(&cand, &ngram_counts(r, n)))
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L recall: `LCS(candidate, reference) / |reference|`.
pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Usage("ROUGE-L reference must be non-empty".into()));
    }
    Ok(lcs_len(candidate, reference) as f64 / reference.len() as f64)
}

/// ROUGE-L averaged over references; empty references score 0.
pub fn rouge_l_multi(candidate: &TokenSequence, references: &[TokenSequence]) -> Result<f64> {
    mean_over_references(references, |r| rouge_l(candidate, r).unwrap_or(0.0))
}

/// In-order token pairs `(t_i, t_j)`, `i < j`, with at most `max_gap` tokens
/// between them (`None` = unlimited).
fn skip_bigrams(tokens: &[String], max_gap: Option<usize>) -> HashMap<(&str, &str), usize> {
    let mut counts = HashMap::new();
    for i in 0..tokens.len() {
        let end = match max_gap {
            Some(g) => (i + g + 2).min(tokens.len()),
            None => tokens.len(),
        };
        for j in i + 1..end {
            *counts.entry((tokens[i].as_str(), tokens[j].as_str())).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-S with unlimited gaps.
pub fn rouge_s(candidate: &TokenSequence, references: &[TokenSequence]) -> Result<f64> {
    rouge_s_with_gap(candidate, references, None)
}

/// ROUGE-S with clipped skip-bigram counts. References with fewer than two
/// tokens score 0.
pub fn rouge_s_with_gap(
    candidate: &TokenSequence,
    references: &[TokenSequence],
    max_gap: Option<usize>,
) -> Result<f64> {
    let cand = skip_bigrams(candidate, max_gap);
    mean_over_references(references, |r| clipped_recall(&cand, &skip_bigrams(r, max_gap)))
}
