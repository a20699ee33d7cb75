//! Run configuration, training, evaluation, benchmarking and attention inspection.

mod config;
mod eval;
mod inspect;
mod optim;
mod train;

pub use config::{RunConfig, RunSection, TrainConfig};
pub use eval::{
    bench, dev_error_rate, evaluate, evaluate_parallel, grid_ratio, BenchEntry, BenchRatio,
    BenchReport, DecodeRecord, MeanStats, MetricsReport, FRAME_SHIFT_SECONDS,
    REPORT_SCHEMA_VERSION,
};
pub use inspect::{
    export_attention, from_tsv, inspect_attention, leftmost_mass, to_pgm, to_tsv, AttentionReport,
    AttentionSummary, HeadAttention,
};
pub use optim::{clip_global_norm, learning_rate, Optimizer, OptimizerKind};
pub use train::{
    delay_sweep, prepare_training, sweep_entry, train, LogEntry, PreparedSet, SweepEntry,
    SweepReport, TrainOutcome,
};

use crate::error::Result;
use crate::synthdata::{generate_dataset, Dataset};

/// The dataset named by the config, or a freshly generated one.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.run.dataset {
        Some(path) => Dataset::load(path),
        None => generate_dataset(&cfg.task, cfg.run.dataset_size),
    }
}
