//! Dataset statistics for summarization corpora.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::TokenSequence;

/// Percentage of summary n-gram occurrences that never appear in the source.
/// `None` when the summary has fewer than `n` tokens (or `n == 0`).
pub fn novel_ngram_percentage(source: &TokenSequence, summary: &TokenSequence, n: usize) -> Option<f64> {
    if n == 0 || summary.len() < n {
        return None;
    }
    let seen: HashSet<&[String]> = if source.len() >= n {
        source.windows(n).collect()
    } else {
        HashSet::new()
    };
    let total = summary.len() - n + 1;
    let novel = summary.windows(n).filter(|g| !seen.contains(g)).count();
    Some(100.0 * novel as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    /// Clipped unigram overlap divided by summary length.
    pub fraction: f64,
    pub keep: bool,
}

/// Keeps a text/summary pair iff `lo < overlap < hi`.
pub fn unigram_intersection_filter(text: &TokenSequence, summary: &TokenSequence, lo: f64, hi: f64) -> FilterDecision {
    if summary.is_empty() || text.is_empty() {
        return FilterDecision {
            fraction: 0.0,
            keep: false,
        };
    }
    let mut available: HashMap<&str, usize> = HashMap::new();
    for t in text.iter() {
        *available.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in summary.iter() {
        if let Some(c) = available.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let fraction = overlap as f64 / summary.len() as f64;
    FilterDecision {
        fraction,
        keep: lo < fraction && fraction < hi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> TokenSequence {
        TokenSequence::words(s)
    }

    #[test]
    fn novel_ngram_examples() {
        assert_eq!(novel_ngram_percentage(&w("a b c d"), &w("b c"), 2), Some(0.0));
        assert_eq!(novel_ngram_percentage(&w("a b c d"), &w("x y z"), 1), Some(100.0));
        assert_eq!(novel_ngram_percentage(&w("a b c d"), &w("a b x"), 2), Some(50.0));
        assert_eq!(novel_ngram_percentage(&w("a b"), &w("a"), 2), None);
    }

    #[test]
    fn novel_ngrams_use_occurrence_counts() {
        // x y, y a, b x, x y are novel; a b is in the source
        assert_eq!(novel_ngram_percentage(&w("a b"), &w("x y a b x y"), 2), Some(80.0));
    }

    #[test]
    fn filter_examples() {
        let d = unigram_intersection_filter(&w("a b c"), &w("a b c"), 0.3, 0.92);
        assert_eq!((d.fraction, d.keep), (1.0, false));
        let d = unigram_intersection_filter(&w("a b c"), &w("x y"), 0.3, 0.92);
        assert_eq!((d.fraction, d.keep), (0.0, false));
        let d = unigram_intersection_filter(&w("a b c d"), &w("a b x y"), 0.3, 0.92);
        assert_eq!((d.fraction, d.keep), (0.5, true));
    }
}
