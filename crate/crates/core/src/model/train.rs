use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::task::{Example, Split, TaskSpec, EOS};
use super::transformer::ToyTransformer;
use crate::error::{Error, Result};
use crate::tensor::{sgd_step, SgdConfig, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Mean task cross-entropy per step, measured before that step's update.
    pub losses: Vec<f64>,
    /// Orthogonality penalty per step; empty without AdaLoRA adapters.
    pub penalties: Vec<f64>,
    /// Surviving singular values summed over AdaLoRA adapters, after each
    /// prune.
    pub effective_ranks: Vec<usize>,
    pub steps: usize,
    #[serde(skip)]
    pub step_seconds: Vec<f64>,
}

impl TrainingTrace {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// `1 − final/initial`.
    pub fn loss_reduction(&self) -> Option<f64> {
        Some(1.0 - self.final_loss()? / self.initial_loss()?)
    }
}

fn check_compatible(model: &ToyTransformer, task: &TaskSpec) -> Result<()> {
    task.validate()?;
    let cfg = model.config();
    if task.vocab_size != cfg.vocab_size {
        return Err(Error::Config(format!(
            "task vocabulary {} differs from model vocabulary {}",
            task.vocab_size, cfg.vocab_size
        )));
    }
    if task.max_len > cfg.max_len {
        return Err(Error::Config(format!(
            "task sequences up to {} exceed model max length {}",
            task.max_len, cfg.max_len
        )));
    }
    Ok(())
}

/// Plain SGD on the mean batch cross-entropy (plus the orthogonality penalty
/// when AdaLoRA adapters are attached, followed by one prune per step).
/// Whatever is trainable in the model is trained; base weights frozen by
/// `attach_adapters` or `quantize_base` stay untouched.
pub fn train(model: &mut ToyTransformer, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainingTrace> {
    cfg.validate()?;
    check_compatible(model, task)?;
    let mut rng = task.rng(Split::Train);
    let adalora = model.adapters().any(|(_, a)| a.as_adalora().is_some());
    let mut trace = TrainingTrace::default();

    for step in 0..cfg.sgd.steps {
        let started = Instant::now();
        let batch: Vec<Example> = (0..cfg.batch_size).map(|_| task.sample(&mut rng)).collect();
        let mut tape = Tape::with_precision(model.compute_precision);
        let mut total = None;
        for ex in &batch {
            let l = model.example_loss(&mut tape, ex)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let ce = tape.scale(total.expect("batch is non-empty"), 1.0 / cfg.batch_size as f64);
        let ce_value = tape.value(ce).get(0, 0);
        let objective = match model.orthogonality_penalty(&mut tape)? {
            Some(p) => {
                trace.penalties.push(tape.value(p).get(0, 0));
                tape.add(ce, p)?
            }
            None => ce,
        };
        let objective_value = tape.value(objective).get(0, 0);
        if !ce_value.is_finite() || !objective_value.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                reason: format!("loss became {objective_value}"),
            });
        }
        trace.losses.push(ce_value);

        tape.backward(objective, &mut model.params)?;
        sgd_step(&mut model.params, &cfg.sgd)?;
        if adalora {
            let mut alive = 0;
            let mut store = std::mem::take(&mut model.params);
            let pruned = model.adalora_adapters_mut().into_iter().try_for_each(|a| {
                a.prune_step(&mut store)?;
                alive += a.effective_rank();
                Ok::<_, Error>(())
            });
            model.params = store;
            pruned?;
            trace.effective_ranks.push(alive);
        }
        trace.step_seconds.push(started.elapsed().as_secs_f64());
        trace.steps += 1;
    }
    Ok(trace)
}

/// Mean cross-entropy over `examples` without updating anything.
pub fn evaluate_loss(model: &ToyTransformer, examples: &[Example]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .iter()
        .map(|ex| {
            let mut tape = Tape::with_precision(model.compute_precision);
            let l = model.example_loss(&mut tape, ex)?;
            Ok(tape.value(l).get(0, 0))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Greedy decodes of `examples`, in input order.
pub fn decode_all(model: &ToyTransformer, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
    examples.iter().map(|ex| model.greedy_decode(&ex.source)).collect()
}

/// Fraction of examples whose greedy decode is exactly `target` then `EOS`.
pub fn decode_accuracy(model: &ToyTransformer, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let decoded = decode_all(model, examples)?;
    let hits = decoded
        .iter()
        .zip(examples)
        .filter(|(d, ex)| d.len() == ex.target.len() + 1 && d[..ex.target.len()] == ex.target[..] && d[ex.target.len()] == EOS)
        .count();
    Ok(hits as f64 / examples.len() as f64)
}
