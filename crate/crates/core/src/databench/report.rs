use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{aupro, auroc, average_precision, ScoredMask, AUPRO_FPR_LIMIT, AUPRO_MAX_THRESHOLDS};
use crate::error::{Error, Result};

/// Prediction for one evaluation image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub class: String,
    pub score: f64,
    /// Per-pixel anomaly probabilities, `h x w`.
    pub map: Vec<f64>,
    pub mask: Vec<bool>,
    pub h: usize,
    pub w: usize,
    pub abnormal: bool,
}

/// Metrics of one class. Entries are `None` when undefined for its data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub images: usize,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub aupro: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    /// Macro averages over classes where the metric is defined.
    pub mean: ClassMetrics,
    /// Images whose decoding emitted no `<seg>` and were scored as all zero.
    pub no_seg: usize,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("metric undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn class_metrics(class: &str, recs: &[&EvalRecord]) -> Result<ClassMetrics> {
    let scores: Vec<f64> = recs.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = recs.iter().map(|r| r.abnormal).collect();
    let pix: Vec<f64> = recs.iter().flat_map(|r| r.map.iter().copied()).collect();
    let gt: Vec<bool> = recs.iter().flat_map(|r| r.mask.iter().copied()).collect();
    let maps: Vec<ScoredMask> = recs
        .iter()
        .map(|r| ScoredMask {
            scores: r.map.clone(),
            gt: r.mask.clone(),
            h: r.h,
            w: r.w,
        })
        .collect();
    Ok(ClassMetrics {
        class: class.into(),
        images: recs.len(),
        image_auroc: defined(auroc(&scores, &labels))?,
        pixel_auroc: defined(auroc(&pix, &gt))?,
        aupro: defined(aupro(&maps, AUPRO_FPR_LIMIT, Some(AUPRO_MAX_THRESHOLDS)))?,
        image_ap: defined(average_precision(&scores, &labels))?,
        pixel_ap: defined(average_precision(&pix, &gt))?,
    })
}

fn mean_of(rows: &[ClassMetrics], f: impl Fn(&ClassMetrics) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Per-class metrics (classes in sorted order) plus macro averages.
pub fn evaluate_records(records: &[EvalRecord], no_seg: usize) -> Result<MetricsReport> {
    for r in records {
        if r.map.len() != r.h * r.w || r.mask.len() != r.h * r.w {
            return Err(Error::shape(format!(
                "record of class {} has mismatched map and mask",
                r.class
            )));
        }
    }
    let mut by_class: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(&r.class).or_default().push(r);
    }
    let classes = by_class
        .iter()
        .map(|(c, recs)| class_metrics(c, recs))
        .collect::<Result<Vec<_>>>()?;
    let mean = ClassMetrics {
        class: "mean".into(),
        images: records.len(),
        image_auroc: mean_of(&classes, |c| c.image_auroc),
        pixel_auroc: mean_of(&classes, |c| c.pixel_auroc),
        aupro: mean_of(&classes, |c| c.aupro),
        image_ap: mean_of(&classes, |c| c.image_ap),
        pixel_ap: mean_of(&classes, |c| c.pixel_ap),
    };
    Ok(MetricsReport { classes, mean, no_seg })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{:.4}", x * 100.0))
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Percentages per class, with the macro mean as the last row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("class,images,img,pixel,pro,img_ap,pixel_ap\n");
        for c in self.classes.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.class,
                c.images,
                cell(c.image_auroc),
                cell(c.pixel_auroc),
                cell(c.aupro),
                cell(c.image_ap),
                cell(c.pixel_ap)
            ));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
