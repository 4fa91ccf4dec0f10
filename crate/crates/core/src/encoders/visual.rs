use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, TransformerBlock};
use crate::numcore::{named_rng, Graph, Init, ParamId, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    /// Number of feature levels returned, including the patch embedding.
    pub levels: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            width: 64,
            levels: 6,
        }
    }
}

impl VisualEncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.width == 0 || self.levels < 2 {
            return Err(Error::Config(
                "visual encoder needs width > 0 and at least 2 levels".into(),
            ));
        }
        Ok(())
    }
}

/// Per-level token grids, each `[h * w, C]`, shallowest first.
#[derive(Clone, Debug)]
pub struct MultiLevelFeatures {
    pub levels: Vec<Var>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl MultiLevelFeatures {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn last(&self) -> Var {
        *self.levels.last().expect("at least one level")
    }
}

/// Patch-embedding transformer. Level 0 is the patch embedding itself; level
/// `l > 0` is the output of block `l`, with a final norm on the last level.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: VisualEncoderConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
}

impl VisualEncoder {
    pub fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, cfg: &VisualEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (p, c) = (cfg.patch, cfg.width);
        let patch_w = store.add_init(
            "enc.patch.w",
            &[p, p, 3, c],
            Init::FanIn { fan_in: p * p * 3 },
            &mut named_rng(seed, "enc.patch.w"),
        )?;
        let patch_b = store.add_init("enc.patch.b", &[c], Init::Zeros, &mut named_rng(seed, "enc.patch.b"))?;
        let pos = store.add_init(
            "enc.pos",
            &[cfg.tokens(), c],
            Init::Normal { std: 0.02 },
            &mut named_rng(seed, "enc.pos"),
        )?;
        let blocks = (1..cfg.levels)
            .map(|l| TransformerBlock::new(store, seed, &format!("enc.block{l}"), c))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, seed, "enc.norm", c)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            blocks,
            final_norm,
        })
    }

    /// Encodes an `[H, W, 3]` image.
    pub fn encode<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, image: Var) -> Result<MultiLevelFeatures> {
        let (h, w) = match *g.shape(image) {
            [h, w, 3] => (h, w),
            ref sh => return Err(Error::shape(format!("encode_image: expected [H, W, 3], got {sh:?}"))),
        };
        let p = self.cfg.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "encode_image: {h}x{w} not divisible by patch {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        if gh * gw != self.cfg.tokens() {
            return Err(Error::shape(format!(
                "encode_image: {h}x{w} gives {} tokens, encoder expects {}",
                gh * gw,
                self.cfg.tokens()
            )));
        }
        let c = self.cfg.width;
        let pw = g.param(s, self.patch_w);
        let pb = g.param(s, self.patch_b);
        let x = g.conv2d(image, pw, Some(pb), p, 0)?;
        let x = g.reshape(x, &[gh * gw, c])?;
        let pos = g.param(s, self.pos);
        let mut x = g.add(x, pos)?;
        let mut levels = vec![x];
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(g, s, x, None)?;
            if i + 1 == self.blocks.len() {
                x = self.final_norm.forward(g, s, x)?;
            }
            levels.push(x);
        }
        Ok(MultiLevelFeatures {
            levels,
            grid_h: gh,
            grid_w: gw,
            channels: c,
        })
    }

    pub fn final_norm(&self) -> LayerNorm {
        self.final_norm
    }
}
