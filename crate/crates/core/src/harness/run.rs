use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, Mode};
use crate::adapters::Adapter;
use crate::error::Result;
use crate::metrics::{rouge_l, rouge_n, wer, TokenSequence};
use crate::model::{
    decode_all, evaluate_loss, train, AdapterKind, BaseWeight, Example, ParamCounts, Split, TaskSpec, ToyTransformer,
    TrainConfig, EOS,
};
use crate::quant::{footprint_bytes, Footprint};
use crate::tensor::Precision;

/// Pretraining draws from its own data stream so it never replays the
/// examples of the measured run.
const PRETRAIN_SEED_SALT: u64 = 0x5052_4554_5241_494e;

/// Bytes of one stored dense value (checkpoints keep f64).
pub const DENSE_ELEMENT_BYTES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentBytes {
    pub name: String,
    /// `"f64"` for dense tensors, `"pqt1"` for quantized bases.
    pub storage: String,
    pub elements: usize,
    pub bytes: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub components: Vec<ComponentBytes>,
    pub base_bytes: usize,
    pub adapter_bytes: usize,
    /// The same base weights stored at 2 bytes per element.
    pub base_bytes_16bit: usize,
    /// `1 − base_bytes / base_bytes_16bit`; only set when the base is quantized.
    pub base_reduction_vs_16bit: Option<f64>,
    /// Byte breakdown of the quantized bases, summed.
    pub quantized: Option<Footprint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub examples: usize,
    pub sequence_accuracy: f64,
    pub loss: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub penalties: Vec<f64>,
    pub effective_ranks: Vec<usize>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub loss_reduction: Option<f64>,
    pub pretrain_final_loss: Option<f64>,
    pub params: ParamCounts,
    pub footprint: FootprintReport,
    pub checkpoint_bytes: usize,
    pub eval: EvalScores,
}

/// Wall-clock measurements, kept apart from the deterministic report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub pretrain_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub step_seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub timing: RunTiming,
    pub model: ToyTransformer,
    pub checkpoint: Vec<u8>,
}

/// Dense model initialized from `config.seed`, plus the RNG positioned for
/// adapter initialization.
fn fresh_model(config: &ExperimentConfig) -> Result<(ToyTransformer, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = ToyTransformer::new(config.model.clone(), &mut rng)?;
    Ok((model, rng))
}

/// Quantizes and attaches adapters as the mode requires.
pub fn setup_mode(config: &ExperimentConfig, model: &mut ToyTransformer, rng: &mut ChaCha8Rng) -> Result<()> {
    let kind = match config.mode {
        Mode::Full => return Ok(()),
        Mode::Lora => AdapterKind::Lora,
        Mode::AdaLora => AdapterKind::AdaLora {
            gamma: config.gamma,
            schedule: config.budget_schedule()?,
        },
        Mode::Qlora => {
            let spec = config.quant.as_ref().expect("validated");
            model.quantize_base(spec)?;
            model.compute_precision = Precision::F32;
            AdapterKind::Lora
        }
    };
    model.attach_adapters(&kind, config.rank.expect("validated"), &config.targets, rng)
}

/// The untrained model with the configured architecture, quantization and
/// adapters. Checkpoint loading fills it in.
pub fn build_skeleton(config: &ExperimentConfig) -> Result<(ToyTransformer, ChaCha8Rng)> {
    config.validate()?;
    let (mut model, mut rng) = fresh_model(config)?;
    setup_mode(config, &mut model, &mut rng)?;
    Ok((model, rng))
}

pub fn pretrain_task(config: &ExperimentConfig) -> Option<TaskSpec> {
    config.pretrain.as_ref().map(|p| TaskSpec {
        task: p.task,
        seed: config.task.seed ^ PRETRAIN_SEED_SALT,
        ..config.task.clone()
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let mut timing = RunTiming::default();
    let (mut model, mut rng) = fresh_model(config)?;

    let mut pretrain_final_loss = None;
    if let (Some(p), Some(task)) = (&config.pretrain, pretrain_task(config)) {
        let started = Instant::now();
        let trace = train(
            &mut model,
            &task,
            &TrainConfig {
                sgd: p.sgd,
                batch_size: p.batch_size,
            },
        )?;
        pretrain_final_loss = trace.final_loss();
        timing.pretrain_seconds = started.elapsed().as_secs_f64();
    }

    setup_mode(config, &mut model, &mut rng)?;
    let started = Instant::now();
    let trace = train(&mut model, &config.task, &config.train_config())?;
    timing.train_seconds = started.elapsed().as_secs_f64();
    timing.step_seconds = trace.step_seconds.clone();

    let started = Instant::now();
    let held_out = config.task.dataset(Split::HeldOut, config.eval_examples);
    let eval = evaluate(&model, &held_out)?;
    timing.eval_seconds = started.elapsed().as_secs_f64();

    let checkpoint = Checkpoint::capture(config, &model).to_bytes();
    let report = RunReport {
        mode: config.mode,
        seed: config.seed,
        config_hash: config.hash_hex(),
        steps: trace.steps,
        initial_loss: trace.initial_loss(),
        final_loss: trace.final_loss(),
        loss_reduction: trace.loss_reduction(),
        losses: trace.losses,
        penalties: trace.penalties,
        effective_ranks: trace.effective_ranks,
        pretrain_final_loss,
        params: model.parameter_counts(),
        footprint: footprint_report(&model),
        checkpoint_bytes: checkpoint.len(),
        eval,
    };
    Ok(RunOutcome {
        report,
        timing,
        model,
        checkpoint,
    })
}

/// Runs and writes `report.json`, `timing.json` and `checkpoint.bin` to `out`.
pub fn run_to_dir(config: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let outcome = run_experiment(config)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    std::fs::write(out.join("timing.json"), serde_json::to_string_pretty(&outcome.timing)?)?;
    std::fs::write(out.join("checkpoint.bin"), &outcome.checkpoint)?;
    Ok(outcome)
}

/// Stored bytes of every base weight and adapter factor.
pub fn footprint_report(model: &ToyTransformer) -> FootprintReport {
    let mut components = Vec::new();
    let mut base_bytes = 0;
    let mut adapter_bytes = 0;
    let mut base_elements = 0;
    let mut quantized: Option<Footprint> = None;
    for p in model.projections() {
        match &p.base {
            BaseWeight::Dense(id) => {
                let t = model.params.get(*id);
                base_elements += t.len();
                base_bytes += t.len() * DENSE_ELEMENT_BYTES;
                components.push(ComponentBytes {
                    name: p.name.clone(),
                    storage: "f64".into(),
                    elements: t.len(),
                    bytes: t.len() * DENSE_ELEMENT_BYTES,
                    trainable: t.requires_grad(),
                });
            }
            BaseWeight::Quantized(q) => {
                let f = footprint_bytes(q);
                base_elements += q.len();
                base_bytes += f.total;
                quantized = Some(quantized.unwrap_or_default() + f);
                components.push(ComponentBytes {
                    name: p.name.clone(),
                    storage: "pqt1".into(),
                    elements: q.len(),
                    bytes: f.total,
                    trainable: false,
                });
            }
        }
        if let Some(a) = &p.adapter {
            let ids = match a {
                Adapter::Lora(l) => vec![l.a(), l.b()],
                Adapter::AdaLora(l) => vec![l.p(), l.lambda(), l.q()],
            };
            for id in ids {
                let t = model.params.get(id);
                adapter_bytes += t.len() * DENSE_ELEMENT_BYTES;
                components.push(ComponentBytes {
                    name: model.params.name(id).to_string(),
                    storage: "f64".into(),
                    elements: t.len(),
                    bytes: t.len() * DENSE_ELEMENT_BYTES,
                    trainable: t.requires_grad(),
                });
            }
        }
    }
    let base_bytes_16bit = base_elements * 2;
    FootprintReport {
        components,
        base_bytes,
        adapter_bytes,
        base_bytes_16bit,
        base_reduction_vs_16bit: quantized.map(|_| 1.0 - base_bytes as f64 / base_bytes_16bit as f64),
        quantized,
    }
}

/// Token ids rendered as words so the text metrics apply unchanged.
fn id_tokens(ids: &[usize]) -> TokenSequence {
    TokenSequence::new(ids.iter().map(|i| format!("t{i}"))).expect("ids render as single words")
}

/// Held-out loss, exact-match accuracy, and the text metrics of greedy
/// decodes (EOS stripped) against targets.
pub fn evaluate(model: &ToyTransformer, examples: &[Example]) -> Result<EvalScores> {
    let loss = evaluate_loss(model, examples)?;
    let decoded = decode_all(model, examples)?;
    let n = examples.len().max(1) as f64;
    let (mut acc, mut r1, mut r2, mut rl, mut w) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (d, ex) in decoded.iter().zip(examples) {
        let body = d.strip_suffix(&[EOS]).unwrap_or(d);
        if body == ex.target.as_slice() && d.last() == Some(&EOS) {
            acc += 1.0;
        }
        let cand = id_tokens(body);
        let reference = id_tokens(&ex.target);
        r1 += rouge_n(&cand, std::slice::from_ref(&reference), 1)?;
        r2 += rouge_n(&cand, std::slice::from_ref(&reference), 2)?;
        rl += rouge_l(&cand, &reference)?;
        w += wer(&reference, &cand)?.score;
    }
    Ok(EvalScores {
        examples: examples.len(),
        sequence_accuracy: acc / n,
        loss,
        rouge1: r1 / n,
        rouge2: r2 / n,
        rouge_l: rl / n,
        wer: w / n,
    })
}
