//! Configuration, training, evaluation and inference.

mod config;
mod eval;
mod model;
pub mod selfcheck;
mod train;


pub use config::{ModelConfig, OptimConfig, Precision, ProjectorKind, RunConfig};
pub use eval::{
    eval_records, evaluate, evaluate_checkpoint, heat_color, infer, load_model, seg_query, EvalMode, InferOutput,
};
pub use model::{resize, Example, Model, Prediction};
pub use train::{
    build_queues, load_items, train, write_losses, EpochLosses, LoadedItem, TrainOptions, TrainOutcome, TrainState,
};

use crate::databench::{make_split, Dataset, SplitSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const QUEUE_FILE: &str = "queues.tsv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// The class split of a run: the configured one, or one derived from
/// `train_fraction` and the seed. Overlap or out-of-range ids are protocol
/// errors.
pub fn resolve_split(cfg: &RunConfig, ds: &Dataset) -> Result<SplitSpec> {
    let n = ds.annotations.classes.len();
    let split = match &cfg.split {
        Some(s) => s.clone(),
        None => make_split(n, cfg.train_fraction, cfg.seed)?,
    };
    split.validate().map_err(|e| match e {
        Error::Protocol(_) => e,
        other => Error::Protocol(other.to_string()),
    })?;
    if let Some(bad) = split.train.iter().chain(&split.test).find(|&&c| c >= n) {
        return Err(Error::Protocol(format!(
            "class id {bad} is outside the dataset's {n} classes"
        )));
    }
    Ok(split)
}
