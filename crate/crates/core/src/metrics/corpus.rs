//! Batch evaluation of `{source, candidate, references}` records.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{novel_ngram_percentage, rouge_l_multi, rouge_n, rouge_s, tokenize, wer, TokenizeConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusExample {
    #[serde(default)]
    pub source: String,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub rouge_s: f64,
    /// Against the first reference.
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Novel 1/2/3-gram percentages of the candidate w.r.t. the source.
    pub novel_ngrams: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub rouge_s: f64,
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Means over examples where the statistic is defined.
    pub novel_ngrams: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tokenizer: TokenizeConfig,
    pub examples: Vec<ExampleScores>,
    pub aggregate: Aggregate,
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<CorpusExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: CorpusExample = serde_json::from_str(&line)
            .map_err(|e| Error::Usage(format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn score_example(ex: &CorpusExample, tok: &TokenizeConfig) -> Result<ExampleScores> {
    let cand = tokenize(&ex.candidate, tok);
    let source = tokenize(&ex.source, tok);
    let refs: Vec<_> = ex.references.iter().map(|r| tokenize(r, tok)).collect();
    let first = refs
        .first()
        .ok_or_else(|| Error::Usage("example has no references".into()))?;
    let w = wer(first, &cand)?;
    Ok(ExampleScores {
        rouge1: rouge_n(&cand, &refs, 1)?,
        rouge2: rouge_n(&cand, &refs, 2)?,
        rouge_l: rouge_l_multi(&cand, &refs)?,
        rouge_s: rouge_s(&cand, &refs)?,
        wer: w.score,
        substitutions: w.substitutions,
        deletions: w.deletions,
        insertions: w.insertions,
        novel_ngrams: [1, 2, 3].map(|n| novel_ngram_percentage(&source, &cand, n)),
    })
}

/// Scores every example; `parallel` fans out over rayon but the merged order
/// (and therefore the report) is identical to the sequential path.
pub fn evaluate_corpus(examples: &[CorpusExample], tok: &TokenizeConfig, parallel: bool) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Usage("corpus is empty".into()));
    }
    let scores: Vec<ExampleScores> = if parallel {
        examples.par_iter().map(|e| score_example(e, tok)).collect::<Result<_>>()?
    } else {
        examples.iter().map(|e| score_example(e, tok)).collect::<Result<_>>()?
    };
    let n = scores.len() as f64;
    let mean = |f: fn(&ExampleScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let novel = [0, 1, 2].map(|k| {
        let defined: Vec<f64> = scores.iter().filter_map(|s| s.novel_ngrams[k]).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    });
    let aggregate = Aggregate {
        rouge1: mean(|s| s.rouge1),
        rouge2: mean(|s| s.rouge2),
        rouge_l: mean(|s| s.rouge_l),
        rouge_s: mean(|s| s.rouge_s),
        wer: mean(|s| s.wer),
        substitutions: scores.iter().map(|s| s.substitutions).sum(),
        deletions: scores.iter().map(|s| s.deletions).sum(),
        insertions: scores.iter().map(|s| s.insertions).sum(),
        novel_ngrams: novel,
    };
    Ok(MetricReport {
        tokenizer: *tok,
        examples: scores,
        aggregate,
    })
}

impl MetricReport {
    /// `metric,value` rows of the aggregate; undefined statistics are left blank.
    pub fn write_summary_csv(&self, mut out: impl Write) -> Result<()> {
        let a = &self.aggregate;
        writeln!(out, "metric,value")?;
        for (name, v) in [
            ("rouge1", a.rouge1),
            ("rouge2", a.rouge2),
            ("rougeL", a.rouge_l),
            ("rougeS", a.rouge_s),
            ("wer", a.wer),
        ] {
            writeln!(out, "{name},{v}")?;
        }
        for (name, v) in [
            ("substitutions", a.substitutions),
            ("deletions", a.deletions),
            ("insertions", a.insertions),
        ] {
            writeln!(out, "{name},{v}")?;
        }
        for (k, v) in a.novel_ngrams.iter().enumerate() {
            match v {
                Some(v) => writeln!(out, "novel_{}gram_pct,{v}", k + 1)?,
                None => writeln!(out, "novel_{}gram_pct,", k + 1)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(source: &str, cand: &str, refs: &[&str]) -> CorpusExample {
        CorpusExample {
            source: source.into(),
            candidate: cand.into(),
            references: refs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let corpus: Vec<_> = (0..50)
            .map(|i| ex("a b c d e", &format!("a b {i}"), &["a b c", "b c d"]))
            .collect();
        let tok = TokenizeConfig::default();
        let a = evaluate_corpus(&corpus, &tok, false).unwrap();
        let b = evaluate_corpus(&corpus, &tok, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_roundtrip_and_summary() {
        let text = "{\"source\":\"The cat sat.\",\"candidate\":\"the cat\",\"references\":[\"The cat!\"]}\n\n";
        let corpus = read_jsonl(text.as_bytes()).unwrap();
        let report = evaluate_corpus(&corpus, &TokenizeConfig::default(), false).unwrap();
        assert_eq!(report.aggregate.rouge1, 1.0);
        assert_eq!(report.aggregate.novel_ngrams[2], None);
        let mut csv = Vec::new();
        report.write_summary_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.contains("rouge1,1\n"));
        assert!(csv.contains("novel_3gram_pct,\n"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = read_jsonl("{\"candidate\":\"a\",\"references\":[\"a\"]}\nnot json\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
