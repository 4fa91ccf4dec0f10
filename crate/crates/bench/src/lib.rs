//! Fixtures shared by the benchmarks.

use vmad_core::databench::{normal_text, render_sample, task_texts, ScoredMask, TaskKind, CLASS_NAMES, PATTERNS};
use vmad_core::numcore::named_rng;
use vmad_core::pipeline::{ModelConfig, ProjectorKind, RunConfig};
use vmad_core::{Result, Tensor};

/// Model of the smoke preset with the given projector.
pub fn smoke_model(projector: ProjectorKind) -> ModelConfig {
    let mut cfg = RunConfig::smoke("", "").model;
    cfg.projector = projector;
    cfg
}

/// A rendered abnormal sample with its segmentation task texts.
pub struct Sample {
    /// `[S, S, 3]`.
    pub image: Tensor<f32>,
    /// `[S, S]`.
    pub mask: Tensor<f32>,
    pub instruction: String,
    pub answer: String,
    pub normal_text: String,
}

pub fn sample(size: usize) -> Result<Sample> {
    let s = render_sample(0, 0, 0, 1, size);
    let mask: Vec<f64> = s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let normal = normal_text(CLASS_NAMES[0], PATTERNS[0]);
    let (instruction, answer) = task_texts(TaskKind::SegAnswer, CLASS_NAMES[0], &normal, 1);
    Ok(Sample {
        image: Tensor::from_f64(&[size, size, 3], &s.image)?,
        mask: Tensor::from_f64(&[size, size], &mask)?,
        instruction,
        answer,
        normal_text: normal,
    })
}

/// `n` maps of `size x size` with a square defect and noisy scores that
/// favour it.
pub fn scored_maps(n: usize, size: usize) -> Vec<ScoredMask> {
    use rand::Rng;
    (0..n)
        .map(|i| {
            let mut rng = named_rng(i as u64, "bench.maps");
            let (y0, x0) = (rng.gen_range(0..size / 2), rng.gen_range(0..size / 2));
            let side = size / 4;
            let gt: Vec<bool> = (0..size * size)
                .map(|k| {
                    let (y, x) = (k / size, k % size);
                    (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)
                })
                .collect();
            let scores = gt
                .iter()
                .map(|&d| rng.gen_range(0.0..1.0) + if d { 0.5 } else { 0.0 })
                .collect();
            ScoredMask {
                scores,
                gt,
                h: size,
                w: size,
            }
        })
        .collect()
}
