use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::databench::{
    evaluate_records, image_score, read_rgb, save_png_gray, task_texts, Dataset, EvalRecord, MetricsReport, Record,
    TaskKind,
};
use crate::error::{Error, Result};
use crate::numcore::{checkpoint, ParamStore, Real, Tensor};

use super::config::RunConfig;
use super::model::{resize, Model};
use super::{resolve_split, METRICS_CSV, METRICS_JSON};

/// Where the score maps come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Model,
    /// Ground-truth masks used as predictions; a harness self-test.
    Oracle,
}

/// Evaluation images: the `eval_split` records of the held-out classes.
pub fn eval_records<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Result<Vec<&'a Record>> {
    let split = resolve_split(cfg, ds)?;
    let recs: Vec<&Record> = ds
        .records()
        .iter()
        .filter(|r| split.test.contains(&r.class_id) && r.split == cfg.eval_split)
        .collect();
    if recs.is_empty() {
        return Err(Error::Dataset(format!(
            "no `{}` images for the held-out classes",
            cfg.eval_split
        )));
    }
    Ok(recs)
}

/// Seg-only query for one record, as used at evaluation time.
pub fn seg_query(r: &Record) -> String {
    task_texts(TaskKind::SegOnly, &r.class, &r.normal_text, -1).0
}

fn score_record<R: Real>(
    model: &Model,
    store: &ParamStore<R>,
    ds: &Dataset,
    r: &Record,
    mode: EvalMode,
    max_new: usize,
) -> Result<(EvalRecord, bool)> {
    let mask = ds.load_mask::<R>(r)?;
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let gt: Vec<bool> = mask.data().iter().map(|v| v.as_f64() > 0.5).collect();
    let (map, emitted) = match mode {
        EvalMode::Oracle => (gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), true),
        EvalMode::Model => {
            let size = model.image_size();
            let image = resize(&ds.load_image::<R>(r)?, size, size)?;
            let pred = model.predict(store, &image, &seg_query(r), max_new)?;
            match pred.probs {
                Some(p) => (resize(&p, h, w)?.data().iter().map(|v| v.as_f64()).collect(), true),
                None => (vec![0.0; h * w], false),
            }
        }
    };
    let map: Vec<f64> = map;
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "evaluate" });
    }
    Ok((
        EvalRecord {
            class: r.class.clone(),
            score: image_score(&map),
            map,
            mask: gt,
            h,
            w,
            abnormal: r.is_abnormal(),
        },
        emitted,
    ))
}

/// Scores every held-out image. Images without a `<seg>` in the answer get
/// an all-zero map and are counted in `no_seg`. Results do not depend on
/// `cfg.workers`.
pub fn evaluate<R: Real>(
    cfg: &RunConfig,
    model: &Model,
    store: &ParamStore<R>,
    mode: EvalMode,
) -> Result<MetricsReport> {
    let ds = Dataset::open(&cfg.dataset)?;
    let recs = eval_records(cfg, &ds)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let scored: Vec<(EvalRecord, bool)> = pool.install(|| {
        recs.par_iter()
            .map(|r| score_record(model, store, &ds, r, mode, cfg.max_new_tokens))
            .collect::<Result<Vec<_>>>()
    })?;
    let no_seg = scored.iter().filter(|(_, e)| !e).count();
    if no_seg > 0 {
        log::warn!(
            "{no_seg} of {} answers contained no <seg>; scored as all-normal",
            scored.len()
        );
    }
    let records: Vec<EvalRecord> = scored.into_iter().map(|(r, _)| r).collect();
    evaluate_records(&records, no_seg)
}

/// Loads the model from `checkpoint_path`, evaluates and writes the JSON and
/// CSV reports into `cfg.out_dir`.
pub fn evaluate_checkpoint<R: Real>(cfg: &RunConfig, checkpoint_path: &Path, mode: EvalMode) -> Result<MetricsReport> {
    let ds = Dataset::open(&cfg.dataset)?;
    resolve_split(cfg, &ds)?;
    cfg.validate()?;
    let (model, store) = load_model::<R>(cfg, checkpoint_path)?;
    let report = evaluate(cfg, &model, &store, mode)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    report.write_json(&cfg.out_dir.join(METRICS_JSON))?;
    report.write_csv(&cfg.out_dir.join(METRICS_CSV))?;
    Ok(report)
}

/// Builds the configured model and fills it from a checkpoint.
pub fn load_model<R: Real>(cfg: &RunConfig, checkpoint_path: &Path) -> Result<(Model, ParamStore<R>)> {
    let (model, mut store) = Model::build::<R>(cfg.seed, &cfg.model)?;
    checkpoint::restore_into(&mut store, &checkpoint::load(checkpoint_path)?)?;
    Ok((model, store))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferOutput {
    pub answer: String,
    pub mask_png: PathBuf,
    pub heatmap_png: PathBuf,
    /// Fraction of pixels above 0.5.
    pub mask_fraction: f64,
}

/// Blue-to-red colour map for `p` in `[0, 1]`.
pub fn heat_color(p: f64) -> [u8; 3] {
    let p = p.clamp(0.0, 1.0);
    let ramp = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [
        ramp(1.5 - (4.0 * p - 3.0).abs()),
        ramp(1.5 - (4.0 * p - 2.0).abs()),
        ramp(1.5 - (4.0 * p - 1.0).abs()),
    ]
}

/// Answers `instruction` about the image at `image_path` and writes
/// `answer.txt`, `mask.png` and `heatmap.png` (at the input's size) to
/// `out_dir`. Without a `<seg>` in the answer the mask is empty.
pub fn infer<R: Real>(
    model: &Model,
    store: &ParamStore<R>,
    image_path: &Path,
    instruction: &str,
    max_new: usize,
    out_dir: &Path,
) -> Result<InferOutput> {
    let image: Tensor<R> = read_rgb(image_path)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let size = model.image_size();
    let pred = model.predict(store, &resize(&image, size, size)?, instruction, max_new)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let answer_path = out_dir.join("answer.txt");
    fs::write(&answer_path, format!("{}\n", pred.answer)).map_err(|e| Error::io(&answer_path, e))?;
    let probs: Vec<f64> = match &pred.probs {
        Some(p) => resize(p, h, w)?.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; h * w],
    };
    let mask: Vec<u8> = probs.iter().map(|&p| if p > 0.5 { 255 } else { 0 }).collect();
    let mask_fraction = mask.iter().filter(|&&m| m > 0).count() as f64 / (h * w) as f64;
    let mask_path = out_dir.join("mask.png");
    save_png_gray(&mask_path, h, w, &mask)?;
    let heat: Vec<u8> = probs.iter().flat_map(|&p| heat_color(p)).collect();
    let heat_path = out_dir.join("heatmap.png");
    image::RgbImage::from_raw(w as u32, h as u32, heat)
        .expect("heatmap buffer")
        .save(&heat_path)
        .map_err(|e| Error::Image {
            path: heat_path.clone(),
            source: e,
        })?;
    Ok(InferOutput {
        answer: pred.answer,
        mask_png: mask_path,
        heatmap_png: heat_path,
        mask_fraction,
    })
}
