use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use peftlab::harness::{
    compare_modes, evaluate, footprint_csv, footprint_table, gen_dataset, load_checkpoint, million_param_config,
    run_to_dir, ExperimentConfig, Mode,
};
use peftlab::metrics::{evaluate_corpus, read_jsonl, TokenizeConfig};
use peftlab::model::{BaseWeight, Split, ToyTransformer};
use peftlab::quant::{footprint_bytes, quantize_with, Granularity, QuantScheme, QuantSpec};
use peftlab::{Error, Result};

#[derive(Parser)]
#[command(name = "peftlab", version, about = "LoRA / AdaLoRA / QLoRA experiments on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic task dataset as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Run one experiment and write report.json, timing.json and checkpoint.bin.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on held-out data, or a JSON-lines corpus of candidates.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Held-out examples to score (checkpoint mode).
        #[arg(long)]
        count: Option<usize>,
        /// Score corpus examples on all cores; output order is unchanged.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        keep_case: bool,
        #[arg(long)]
        keep_punctuation: bool,
    },
    /// Quantize the base weights of a checkpoint (or a fresh model) into PQT1 blocks.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skip second-level quantization of the scales.
        #[arg(long)]
        no_double_quant: bool,
    },
    /// Byte footprint of a ~1M-parameter model in 16-bit and quantized forms.
    Footprint {
        #[command(flatten)]
        common: Common,
    },
    /// Run several configs on the same task and seed and line up their curves.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Extra config files; a file may also hold a JSON array of configs.
        configs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    HeldOut,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    /// nf4, int4, int8, asym-int4, sym-int8 …
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    /// toy, tiny, base, small, medium, large
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn read_configs(path: &Path) -> Result<Vec<ExperimentConfig>> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        values
            .into_iter()
            .map(|v| ExperimentConfig::from_json(&v.to_string()))
            .collect()
    } else {
        Ok(vec![ExperimentConfig::from_json(&text)?])
    }
}

impl Common {
    fn base_configs(&self) -> Result<Vec<ExperimentConfig>> {
        match &self.config {
            Some(p) => read_configs(p),
            None => Ok(vec![ExperimentConfig::default()]),
        }
    }

    fn quant_spec(&self, current: Option<QuantSpec>) -> Result<Option<QuantSpec>> {
        let mut spec = match &self.scheme {
            Some(s) => Some(QuantSpec::for_scheme(s.parse::<QuantScheme>()?)),
            None => current,
        };
        if let Some(b) = self.block_size {
            let s = spec
                .as_mut()
                .ok_or_else(|| Error::Config("--block-size needs a quantization scheme".into()))?;
            s.granularity = Granularity::PerBlock(b);
        }
        Ok(spec)
    }

    /// Applies command-line overrides on top of `cfg`.
    fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.task.seed = s;
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<Mode>()?;
        }
        if let Some(r) = self.rank {
            cfg.rank = Some(r);
        }
        if self.scheme.is_some() || self.block_size.is_some() {
            cfg.quant = self.quant_spec(cfg.quant)?;
        }
        if let Some(p) = &self.preset {
            cfg.apply_preset(p)?;
        }
        if let Some(n) = self.steps {
            cfg.sgd.steps = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut all = self.base_configs()?;
        if all.len() != 1 {
            return Err(Error::Usage(format!("expected one config, found {}", all.len())));
        }
        self.apply(all.remove(0))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct QuantizedWeight {
    name: String,
    rows: usize,
    cols: usize,
    bytes: usize,
    max_abs_error: f64,
}

fn quantize_model(model: &ToyTransformer, spec: &QuantSpec, out: &Path) -> Result<Vec<QuantizedWeight>> {
    let mut blocks = BufWriter::new(File::create(out.join("weights.pqt"))?);
    let mut rows = Vec::new();
    for p in model.projections() {
        let w = p.base.materialize(&model.params)?;
        let q = match &p.base {
            BaseWeight::Dense(_) => quantize_with(&w, spec)?,
            BaseWeight::Quantized(q) => (**q).clone(),
        };
        let back = q.dequantize()?;
        let err = w
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let bytes = q.to_bytes();
        debug_assert_eq!(bytes.len(), footprint_bytes(&q).total);
        blocks.write_all(&bytes)?;
        rows.push(QuantizedWeight {
            name: p.name.clone(),
            rows: w.rows(),
            cols: w.cols(),
            bytes: bytes.len(),
            max_abs_error: err,
        });
    }
    blocks.flush()?;
    Ok(rows)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, count, split } => {
            let cfg = common.config()?;
            fs::create_dir_all(&common.out)?;
            let (split, name) = match split {
                SplitArg::Train => (Split::Train, "train.jsonl"),
                SplitArg::HeldOut => (Split::HeldOut, "held_out.jsonl"),
            };
            let path = common.out.join(name);
            gen_dataset(&cfg.task, split, count, BufWriter::new(File::create(&path)?))?;
            println!("wrote {count} examples to {}", path.display());
        }
        Command::Train { common } => {
            let cfg = common.config()?;
            let outcome = run_to_dir(&cfg, &common.out)?;
            let r = &outcome.report;
            println!(
                "{} steps={} loss {:.4} -> {:.4} trainable={} frozen={} accuracy={:.3} wer={:.3}",
                r.mode,
                r.steps,
                r.initial_loss.unwrap_or(f64::NAN),
                r.final_loss.unwrap_or(f64::NAN),
                r.params.trainable,
                r.params.frozen,
                r.eval.sequence_accuracy,
                r.eval.wer
            );
            println!("wrote report.json, timing.json, checkpoint.bin to {}", common.out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            count,
            parallel,
            keep_case,
            keep_punctuation,
        } => {
            fs::create_dir_all(&common.out)?;
            if let Some(path) = checkpoint {
                let (cfg, model) = load_checkpoint(&path)?;
                let held_out = cfg.task.dataset(Split::HeldOut, count.unwrap_or(cfg.eval_examples));
                let scores = evaluate(&model, &held_out)?;
                write_json(&common.out.join("eval.json"), &scores)?;
                println!(
                    "accuracy={:.3} loss={:.4} rouge1={:.3} rougeL={:.3} wer={:.3}",
                    scores.sequence_accuracy, scores.loss, scores.rouge1, scores.rouge_l, scores.wer
                );
            } else if let Some(path) = corpus {
                let examples = read_jsonl(BufReader::new(File::open(&path)?))?;
                let tok = TokenizeConfig {
                    lowercase: !keep_case,
                    strip_punctuation: !keep_punctuation,
                };
                let report = evaluate_corpus(&examples, &tok, parallel)?;
                write_json(&common.out.join("metrics.json"), &report)?;
                report.write_summary_csv(BufWriter::new(File::create(common.out.join("metrics.csv"))?))?;
                let a = &report.aggregate;
                println!(
                    "{} examples rouge1={:.4} rouge2={:.4} rougeL={:.4} rougeS={:.4} wer={:.4}",
                    report.examples.len(),
                    a.rouge1,
                    a.rouge2,
                    a.rouge_l,
                    a.rouge_s,
                    a.wer
                );
            }
        }
        Command::Quantize {
            common,
            checkpoint,
            no_double_quant,
        } => {
            let model = match &checkpoint {
                Some(p) => load_checkpoint(p)?.1,
                None => {
                    // The scheme applies to the output here, not to the run config.
                    let cfg = Common {
                        scheme: None,
                        block_size: None,
                        ..common.clone()
                    }
                    .config()?;
                    ToyTransformer::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
                }
            };
            let mut spec = common.quant_spec(None)?.unwrap_or_else(QuantSpec::nf4_default);
            if no_double_quant {
                spec.double_quant = false;
            }
            spec.validate()?;
            fs::create_dir_all(&common.out)?;
            let rows = quantize_model(&model, &spec, &common.out)?;
            let total: usize = rows.iter().map(|r| r.bytes).sum();
            write_json(&common.out.join("quantize.json"), &rows)?;
            println!(
                "{} weights, {} bytes of PQT1 blocks written to {}",
                rows.len(),
                total,
                common.out.join("weights.pqt").display()
            );
        }
        Command::Footprint { common } => {
            let specs = match common.quant_spec(None)? {
                Some(s) => vec![s],
                None => vec![QuantSpec::int8_default(), QuantSpec::int4_default(), QuantSpec::nf4_default()],
            };
            let rows = footprint_table(&million_param_config(), common.seed.unwrap_or(0), &specs)?;
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("footprint.json"), &rows)?;
            let csv = footprint_csv(&rows);
            fs::write(common.out.join("footprint.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Compare { common, configs } => {
            let mut all = if common.config.is_some() {
                common.base_configs()?
            } else {
                Vec::new()
            };
            for p in &configs {
                all.extend(read_configs(p)?);
            }
            if all.is_empty() {
                return Err(Error::Usage("compare needs --config or config file arguments".into()));
            }
            let all = all.into_iter().map(|c| common.apply(c)).collect::<Result<Vec<_>>>()?;
            let cmp = compare_modes(&all)?;
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("comparison.json"), &cmp)?;
            fs::write(common.out.join("comparison.csv"), cmp.rows_csv())?;
            fs::write(common.out.join("curves.csv"), cmp.curves_csv())?;
            print!("{}", cmp.rows_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
