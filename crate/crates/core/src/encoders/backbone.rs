use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ResBlock};
use crate::numcore::{Graph, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { width: 64 }
    }
}

/// Output spatial size is the input size divided by this.
pub const BACKBONE_STRIDE: usize = 4;

/// Convolutional feature extractor: two stride-2 stages, two residual blocks each.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub width: usize,
    stem: Conv,
    stage1: [ResBlock; 2],
    down: Conv,
    stage2: [ResBlock; 2],
}

/// `[H/4, W/4, C_f]` feature map.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    pub f: Var,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl Backbone {
    pub fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, cfg: &BackboneConfig) -> Result<Self> {
        let c = cfg.width;
        if c == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        Ok(Self {
            width: c,
            stem: Conv::new(store, seed, "bb.stem", 3, 3, c, 2, false)?,
            stage1: [
                ResBlock::new(store, seed, "bb.s1.0", c, false)?,
                ResBlock::new(store, seed, "bb.s1.1", c, false)?,
            ],
            down: Conv::new(store, seed, "bb.down", 3, c, c, 2, false)?,
            stage2: [
                ResBlock::new(store, seed, "bb.s2.0", c, false)?,
                ResBlock::new(store, seed, "bb.s2.1", c, false)?,
            ],
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, image: Var) -> Result<BackboneFeatures> {
        let (h, w) = match *g.shape(image) {
            [h, w, 3] => (h, w),
            ref sh => return Err(Error::shape(format!("backbone: expected [H, W, 3], got {sh:?}"))),
        };
        if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::shape(format!(
                "backbone: {h}x{w} not divisible by {BACKBONE_STRIDE}"
            )));
        }
        let mut x = self.stem.forward(g, s, image)?;
        x = g.relu(x)?;
        for b in &self.stage1 {
            x = b.forward(g, s, x)?;
        }
        x = self.down.forward(g, s, x)?;
        x = g.relu(x)?;
        for b in &self.stage2 {
            x = b.forward(g, s, x)?;
        }
        Ok(BackboneFeatures {
            f: x,
            h: h / BACKBONE_STRIDE,
            w: w / BACKBONE_STRIDE,
            channels: self.width,
        })
    }
}
