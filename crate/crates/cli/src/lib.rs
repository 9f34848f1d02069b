//! Experiment harness: configuration, pipeline runs, manifests and comparisons.

mod compare;
mod config;
mod pipeline;

pub use compare::{compare_runs, Comparison, ComparisonRow};
pub use config::{
    key_docs, parse_config, valid_keys, ConfigError, ExperimentConfig, Stage2Variant, Stage3Real, StageBudget, TeacherSource,
};
pub use pipeline::{
    average_reports, latest_checkpoint, run_eval, run_gen_data, run_pipeline, run_stage1, run_stage2, run_stage3, seed_dir,
    HarnessError, HarnessResult, RunManifest, RunStatus, SeedRun, StageArtifact,
};
