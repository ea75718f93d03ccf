//! Experiment configs, runs, checkpoints, comparisons and footprint tables.

mod checkpoint;
mod compare;
mod config;
mod dataset;
mod footprint;
mod run;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Section, SectionData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use compare::{compare_modes, config_label, Comparison, ComparisonRow};
pub use config::{preset, ExperimentConfig, Mode, Preset, PretrainSpec, PRESETS};
pub use dataset::{gen_dataset, read_dataset};
pub use footprint::{footprint_csv, footprint_table, million_param_config, spec_label, to_bf16_bytes, FootprintRow};
pub use run::{
    build_skeleton, evaluate, footprint_report, pretrain_task, run_experiment, run_to_dir, setup_mode, ComponentBytes,
    EvalScores, FootprintReport, RunOutcome, RunReport, RunTiming, DENSE_ELEMENT_BYTES,
};
