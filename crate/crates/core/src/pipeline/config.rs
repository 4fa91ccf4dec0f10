use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::databench::SplitSpec;
use crate::dssl::DsslConfig;
use crate::encoders::{BackboneConfig, LmConfig, VisualEncoderConfig};
use crate::error::{Error, Result};
use crate::ltc::ResamplerConfig;
use crate::seghead::{LossWeights, SegHeadConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    Ltc,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: VisualEncoderConfig,
    pub backbone: BackboneConfig,
    pub lm: LmConfig,
    pub projector: ProjectorKind,
    pub ltc: ResamplerConfig,
    pub seghead: SegHeadConfig,
    pub dssl: DsslConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: VisualEncoderConfig::default(),
            backbone: BackboneConfig::default(),
            lm: LmConfig::default(),
            projector: ProjectorKind::Ltc,
            ltc: ResamplerConfig::default(),
            seghead: SegHeadConfig::default(),
            dssl: DsslConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let side = self.encoder.grid();
        match self.projector {
            ProjectorKind::Ltc => self.ltc.validate(side, self.encoder.levels).map_err(as_config)?,
            ProjectorKind::Mlp => {
                if self.ltc.rho == 0 || side % self.ltc.rho != 0 {
                    return Err(Error::Config(format!(
                        "rho {} does not divide the {side}x{side} grid",
                        self.ltc.rho
                    )));
                }
            }
        }
        if self.backbone.width == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        if self.encoder.image_size % crate::encoders::BACKBONE_STRIDE != 0 {
            return Err(Error::Config(
                "image size must be a multiple of the backbone stride".into(),
            ));
        }
        if self.lm.width == 0 || self.lm.blocks == 0 || self.lm.context == 0 {
            return Err(Error::Config("language model dims must be positive".into()));
        }
        let visual = side * side / (self.ltc.rho * self.ltc.rho);
        if visual >= self.lm.context {
            return Err(Error::Config(format!(
                "{visual} visual tokens leave no room in a context of {}",
                self.lm.context
            )));
        }
        if self.seghead.blocks == 0 {
            return Err(Error::Config("mask decoder needs at least one block".into()));
        }
        self.dssl.validate()
    }

    /// Visual tokens per image.
    pub fn visual_tokens(&self) -> usize {
        let side = self.encoder.grid() / self.ltc.rho;
        side * side
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_frac: 0.05,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 2,
            grad_clip: Some(1.0),
        }
    }
}

/// Everything a run needs. Missing JSON fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    /// Explicit class split; derived from `train_fraction` and `seed` when absent.
    pub split: Option<SplitSpec>,
    pub train_fraction: f64,
    /// Dataset split directory used for training and for evaluation.
    pub train_split: String,
    pub eval_split: String,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    /// Relative frequency of seg-only, seg+answer and question-answer tasks.
    pub task_mix: [usize; 3],
    pub max_new_tokens: usize,
    /// Evaluation threads; results do not depend on this.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            precision: Precision::F32,
            split: None,
            train_fraction: 2.0 / 3.0,
            train_split: "train".into(),
            eval_split: "test".into(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            task_mix: [2, 2, 1],
            max_new_tokens: 64,
            workers: 1,
        }
    }
}

impl RunConfig {
    /// Small dimensions that train in minutes on one CPU core.
    pub fn smoke(dataset: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            out_dir: out_dir.into(),
            model: ModelConfig {
                encoder: VisualEncoderConfig {
                    image_size: 64,
                    patch: 8,
                    width: 32,
                    levels: 6,
                },
                backbone: BackboneConfig { width: 24 },
                lm: LmConfig {
                    width: 48,
                    blocks: 2,
                    context: 96,
                },
                projector: ProjectorKind::Ltc,
                ltc: ResamplerConfig {
                    rho: 2,
                    lc: 1,
                    n: 4,
                    k: 4,
                    stride: 1.0,
                    d: 32,
                },
                seghead: SegHeadConfig { blocks: 2 },
                dssl: DsslConfig {
                    num_boxes: 4,
                    ..DsslConfig::default()
                },
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Applies `key.path=value`. The value is read as JSON when it parses,
    /// otherwise as a string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = value;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("override `{kv}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1)".into()));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if let Some(c) = o.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.task_mix.iter().sum::<usize>() == 0 {
            return Err(Error::Config("task_mix must not be all zero".into()));
        }
        if self.task_mix[0] + self.task_mix[1] == 0 && self.loss.txt == 0.0 {
            return Err(Error::Config(
                "question-answer tasks only train the text loss, whose weight is zero".into(),
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        if let Some(s) = &self.split {
            s.validate().map_err(as_config)?;
        }
        Ok(())
    }
}
