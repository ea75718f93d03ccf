//! Synthetic sequence-to-sequence tasks with exact target oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// First id usable for content tokens.
pub const FIRST_CONTENT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Every `stride`-th source token, starting with the first.
    SummarizeSynthetic,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "summarize-synthetic" | "summarize" => Ok(Self::SummarizeSynthetic),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    /// Total vocabulary including the two special tokens.
    pub vocab_size: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Copy,
            min_len: 1,
            max_len: 8,
            vocab_size: 16,
            stride: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Which independent stream of examples to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_CONTENT {
            return Err(Error::Config(format!(
                "vocab size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sequence length bounds [{}, {}] are invalid",
                self.min_len, self.max_len
            )));
        }
        if self.task == TaskKind::SummarizeSynthetic && self.stride == 0 {
            return Err(Error::Config("summarize stride must be ≥ 1".into()));
        }
        Ok(())
    }

    /// The task oracle.
    pub fn target(&self, source: &[usize]) -> Vec<usize> {
        match self.task {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
            TaskKind::SummarizeSynthetic => source.iter().step_by(self.stride.max(1)).copied().collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        let len = rng.random_range(self.min_len..=self.max_len);
        let source: Vec<usize> = (0..len)
            .map(|_| rng.random_range(FIRST_CONTENT..self.vocab_size))
            .collect();
        let target = self.target(&source);
        Example { source, target }
    }

    pub fn rng(&self, split: Split) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(match split {
            Split::Train => 0,
            Split::HeldOut => 1,
        });
        rng
    }

    /// `count` examples from the start of `split`; deterministic in the seed.
    pub fn dataset(&self, split: Split, count: usize) -> Vec<Example> {
        let mut rng = self.rng(split);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }
}
