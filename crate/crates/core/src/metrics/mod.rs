//! Text-generation metrics and summarization dataset statistics.

mod corpus;
mod rouge;
mod stats;
mod tokenize;
mod wer;

pub use corpus::{evaluate_corpus, read_jsonl, score_example, Aggregate, CorpusExample, ExampleScores, MetricReport};
pub use rouge::{lcs_len, rouge_l, rouge_l_multi, rouge_n, rouge_s, rouge_s_with_gap};
pub use stats::{novel_ngram_percentage, unigram_intersection_filter, FilterDecision};
pub use tokenize::{tokenize, TokenSequence, TokenizeConfig};
pub use wer::{edit_distance, wer, WerResult};
