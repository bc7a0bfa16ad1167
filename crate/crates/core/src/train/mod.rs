//! Optimization loop, checkpoints, evaluation and inference artifacts.

mod artifacts;
mod checkpoint;
mod config;
mod experiments;
mod optim;
mod run;

pub use artifacts::*;
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{DataConfig, Dataset, LoopConfig, PathsConfig, RunConfig};
pub use experiments::*;
pub use optim::{adam_step, learning_rate, AdamState, OptimizerConfig, ScheduleConfig};
pub use run::{batch_tensors, evaluate, evaluate_samples, train, train_on, LogRecord, TrainOutcome, BEST_CHECKPOINT, LOG_FILE};

/// Sizes the global worker pool from `DSFER_THREADS` (default: all cores).
/// Only the first call has an effect.
pub fn init_threads() {
    let threads = std::env::var("DSFER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let _ = builder.build_global();
}
