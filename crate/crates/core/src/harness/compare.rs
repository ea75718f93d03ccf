use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::run::{run_experiment, RunReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: Mode,
    pub rank: Option<usize>,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub base_bytes: usize,
    pub adapter_bytes: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub loss_reduction: Option<f64>,
    pub sequence_accuracy: f64,
    pub rouge_l: f64,
    pub wer: f64,
}

impl ComparisonRow {
    pub fn from_report(label: String, rank: Option<usize>, r: &RunReport) -> Self {
        Self {
            label,
            mode: r.mode,
            rank,
            trainable_params: r.params.trainable,
            frozen_params: r.params.frozen,
            base_bytes: r.footprint.base_bytes,
            adapter_bytes: r.footprint.adapter_bytes,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            loss_reduction: r.loss_reduction,
            sequence_accuracy: r.eval.sequence_accuracy,
            rouge_l: r.eval.rouge_l,
            wer: r.eval.wer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// `curves[step][run]`; `None` once a shorter run has ended.
    pub curves: Vec<Vec<Option<f64>>>,
    pub reports: Vec<RunReport>,
}

/// Label such as `lora-r8` or `qlora-r8-nf4`.
pub fn config_label(c: &ExperimentConfig) -> String {
    let mut label = c.mode.to_string();
    if let Some(r) = c.rank {
        let _ = write!(label, "-r{r}");
    }
    if let Some(q) = &c.quant {
        let _ = write!(label, "-{}", q.scheme);
    }
    label
}

/// Runs every config and lines up their loss curves step by step. All configs
/// must share the task and the seed.
pub fn compare_modes(configs: &[ExperimentConfig]) -> Result<Comparison> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Usage("compare needs at least one config".into()))?;
    for (i, c) in configs.iter().enumerate().skip(1) {
        if c.task != first.task {
            return Err(Error::Usage(format!("config {i} uses a different task than config 0")));
        }
        if c.seed != first.seed {
            return Err(Error::Usage(format!(
                "config {i} has seed {} but config 0 has seed {}",
                c.seed, first.seed
            )));
        }
    }
    for c in configs {
        c.validate()?;
    }

    let mut rows = Vec::with_capacity(configs.len());
    let mut reports = Vec::with_capacity(configs.len());
    for c in configs {
        let report = run_experiment(c)?.report;
        rows.push(ComparisonRow::from_report(config_label(c), c.rank, &report));
        reports.push(report);
    }
    let longest = reports.iter().map(|r| r.losses.len()).max().unwrap_or(0);
    let curves = (0..longest)
        .map(|s| reports.iter().map(|r| r.losses.get(s).copied()).collect())
        .collect();
    Ok(Comparison { rows, curves, reports })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Comparison {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "label,mode,rank,trainable_params,frozen_params,base_bytes,adapter_bytes,initial_loss,final_loss,loss_reduction,sequence_accuracy,rouge_l,wer\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.label,
                r.mode,
                r.rank.map(|x| x.to_string()).unwrap_or_default(),
                r.trainable_params,
                r.frozen_params,
                r.base_bytes,
                r.adapter_bytes,
                opt(r.initial_loss),
                opt(r.final_loss),
                opt(r.loss_reduction),
                r.sequence_accuracy,
                r.rouge_l,
                r.wer
            );
        }
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("step");
        for r in &self.rows {
            let _ = write!(out, ",{}", r.label);
        }
        out.push('\n');
        for (step, losses) in self.curves.iter().enumerate() {
            let _ = write!(out, "{step}");
            for l in losses {
                let _ = write!(out, ",{}", opt(*l));
            }
            out.push('\n');
        }
        out
    }
}
