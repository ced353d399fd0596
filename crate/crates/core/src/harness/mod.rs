//! Configuration, checkpoints, reports and experiment orchestration.

mod checkpoint;
mod config;
mod pipeline;
mod report;

pub use checkpoint::{file_hash, Checkpoint, Progress, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EvalConfig, ExperimentConfig, SweepConfig};
pub use pipeline::{
    ensure_base, eval_all, eval_seed, eval_store, gen_data, load_base, load_splits, pretrain_base,
    read_curve, render_curves, run_pipeline, score_lines, sweep, train_all, train_seed,
    write_curve, ArtifactHeader, Generation, SweepKind, TrainOptions, ARTIFACT_VERSION,
    CURVE_FORMAT, GENERATIONS_FORMAT,
};
pub use report::{
    aggregate, mean_std, summary_table, RunReport, SeedReport, REPORT_FORMAT, REPORT_VERSION,
};
