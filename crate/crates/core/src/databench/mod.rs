//! Synthetic anomaly data, the on-disk dataset format and the metric suite.

mod generate;
mod metrics;
mod report;
mod text;


use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use generate::{
    generate_dataset, read_rgb, render_sample, save_png_gray, Annotations, AnomalySample, Dataset, GeneratorConfig,
    Record, ANNOTATIONS, MAX_DEFECT_FRAC, MIN_DEFECT_FRAC,
};
pub use metrics::{
    aupro, auroc, average_precision, connected_components, image_score, ScoredMask, AUPRO_FPR_LIMIT,
    AUPRO_MAX_THRESHOLDS,
};
pub use report::{evaluate_records, ClassMetrics, EvalRecord, MetricsReport};
pub use text::{description, normal_text, task_texts, vocabulary, TaskKind, CLASS_NAMES, DEFECT_NAMES, PATTERNS};

use crate::error::{Error, Result};
use crate::numcore::named_rng;

/// Disjoint train and test class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Protocol(
                "train and test class sets must both be non-empty".into(),
            ));
        }
        if let Some(c) = self.train.iter().find(|c| self.test.contains(c)) {
            return Err(Error::Protocol(format!("class {c} is in both train and test sets")));
        }
        Ok(())
    }
}

/// Deterministic random partition with `round(n * train_fraction)` training
/// classes.
pub fn make_split(num_classes: usize, train_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let n_train = (num_classes as f64 * train_fraction).round() as usize;
    if !(0.0..=1.0).contains(&train_fraction) || n_train == 0 || n_train >= num_classes {
        return Err(Error::Param(format!(
            "cannot split {num_classes} classes with train fraction {train_fraction}"
        )));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut named_rng(seed, "data.split"));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec { train, test })
}
