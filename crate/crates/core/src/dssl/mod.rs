//! Defect-sensitive structure learning.
//!
//! Two similarity distributions over a per-class memory queue are built for
//! each random patch box of an image: one in the visual branch (ROI-pooled
//! backbone features against global normal features) and one in LLM space
//! (projected patch crops against semantic tokens). The patch-based
//! similarity distribution loss pulls the second towards the first.

mod boxes;
mod loss;
mod queue;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

pub use boxes::{crop_resize, sample_patch_boxes, PatchBox};
pub use loss::{pbsd_loss, similarity, SimilarityDistribution, Q_FLOOR};
pub use queue::{select_members, write_queue_dump, Label, MemoryQueue, QueueSample};

use crate::encoders::{BackboneFeatures, MultiLevelFeatures, TinyLm, VisualEncoder, Vocab};
use crate::error::{Error, Result};
use crate::ltc::Projector;
use crate::nn::{Linear, Mlp};
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsslConfig {
    pub tau: f64,
    pub num_boxes: usize,
    pub box_min_frac: f64,
    pub box_max_frac: f64,
    pub queue_fraction: f64,
    /// Lower bound on queue entries per label, when the class has them.
    pub queue_min_per_label: usize,
}

impl Default for DsslConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            num_boxes: 8,
            box_min_frac: 0.25,
            box_max_frac: 0.5,
            queue_fraction: 1.0 / 20.0,
            queue_min_per_label: 2,
        }
    }
}

impl DsslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.num_boxes == 0 {
            return Err(Error::Config("num_boxes must be >= 1".into()));
        }
        if !(0.0 < self.box_min_frac && self.box_min_frac <= self.box_max_frac && self.box_max_frac <= 1.0) {
            return Err(Error::Config("box fractions must satisfy 0 < min <= max <= 1".into()));
        }
        if !(self.queue_fraction > 0.0 && self.queue_fraction <= 1.0) {
            return Err(Error::Config("queue_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Projection heads of both branches.
#[derive(Clone, Debug)]
pub struct DsslHeads {
    /// Patch head on ROI-pooled backbone features.
    pub g_alpha: Mlp,
    /// Global head on pooled backbone features.
    pub g_beta: Mlp,
    /// Global head on pooled visual-encoder features (text branch).
    pub g_beta_enc: Mlp,
    /// Text bottleneck producing the prompt token `pi`.
    pub meta: Mlp,
    /// Maps the encoder-branch global feature into LLM space.
    pub psi_proj: Linear,
}

impl DsslHeads {
    /// `g_alpha` and `g_beta` start identical, so a box covering the whole
    /// image embeds onto the image's own global feature.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        backbone_width: usize,
        encoder_width: usize,
        lm_width: usize,
    ) -> Result<Self> {
        let cf = backbone_width;
        let g_alpha = Mlp::new(store, seed, "dssl.g_alpha", cf, cf, cf)?;
        let g_beta = Mlp::new(store, seed, "dssl.g_beta", cf, cf, cf)?;
        for (a, b) in [(g_alpha.fc1.w, g_beta.fc1.w), (g_alpha.fc2.w, g_beta.fc2.w)] {
            let v = store.value(a).clone();
            store.set_value(b, v)?;
        }
        let c = encoder_width;
        Ok(Self {
            g_alpha,
            g_beta,
            g_beta_enc: Mlp::new(store, seed, "dssl.g_beta_enc", c, c, c)?,
            meta: Mlp::new(store, seed, "dssl.meta", lm_width, (lm_width / 4).max(1), lm_width)?,
            psi_proj: Linear::new(store, seed, "dssl.psi_proj", c, lm_width, true)?,
        })
    }
}

/// Constant `[boxes, h * w]` averaging matrix over the feature cells whose
/// centres fall inside each box. A box containing no centre snaps to the
/// cell nearest its own centre.
pub fn roi_weights<R: Real>(boxes: &[PatchBox], img_h: usize, img_w: usize, fh: usize, fw: usize) -> Tensor<R> {
    let sy = img_h as f64 / fh as f64;
    let sx = img_w as f64 / fw as f64;
    let mut m = vec![R::zero(); boxes.len() * fh * fw];
    for (bi, b) in boxes.iter().enumerate() {
        let row = &mut m[bi * fh * fw..][..fh * fw];
        let mut cells = Vec::new();
        for i in 0..fh {
            let cy = (i as f64 + 0.5) * sy;
            if cy < b.y0 as f64 || cy >= b.y1 as f64 {
                continue;
            }
            for j in 0..fw {
                let cx = (j as f64 + 0.5) * sx;
                if cx >= b.x0 as f64 && cx < b.x1 as f64 {
                    cells.push(i * fw + j);
                }
            }
        }
        if cells.is_empty() {
            let cy = (b.y0 + b.y1) as f64 / 2.0 / sy;
            let cx = (b.x0 + b.x1) as f64 / 2.0 / sx;
            let i = (cy.floor() as usize).min(fh - 1);
            let j = (cx.floor() as usize).min(fw - 1);
            log::warn!("patch box {b:?} covers no feature cell centre; using cell ({i}, {j})");
            cells.push(i * fw + j);
        }
        let inv = R::lit(1.0 / cells.len() as f64);
        for c in cells {
            row[c] = inv;
        }
    }
    Tensor::new(&[boxes.len(), fh * fw], m).expect("roi matrix")
}

/// Unit-norm patch embeddings `v^j`, `[boxes, C_f]`.
pub fn patch_embed_visual<R: Real>(
    g: &mut Graph<R>,
    s: &ParamStore<R>,
    heads: &DsslHeads,
    f: &BackboneFeatures,
    boxes: &[PatchBox],
    img_h: usize,
    img_w: usize,
) -> Result<Var> {
    for b in boxes {
        b.validate(img_h, img_w)?;
    }
    let roi = g.constant(roi_weights(boxes, img_h, img_w, f.h, f.w))?;
    let flat = g.reshape(f.f, &[f.h * f.w, f.channels])?;
    let pooled = g.matmul(roi, flat)?;
    let v = heads.g_alpha.forward(g, s, pooled)?;
    g.l2_normalize(v)
}

/// `normalize(head(GAP(features)))` as a `[1, C]` row. Accepts an
/// `[H, W, C]` map or `[N, C]` tokens.
pub fn global_normalized<R: Real>(g: &mut Graph<R>, s: &ParamStore<R>, head: &Mlp, features: Var) -> Result<Var> {
    let pooled = match *g.shape(features) {
        [_, _, _] => g.global_avg_pool(features)?,
        [_, _] => g.mean_axis(features, 0)?,
        ref sh => return Err(Error::shape(format!("global_normalized: unsupported shape {sh:?}"))),
    };
    let c = g.shape(pooled)[0];
    let row = g.reshape(pooled, &[1, c])?;
    let z = head.forward(g, s, row)?;
    g.l2_normalize(z)
}

/// `theta = psi_proj(z_enc) + meta(embed_text(text))`, as a `[1, C_t]` row.
#[allow(clippy::too_many_arguments)]
pub fn semantic_token<R: Real>(
    g: &mut Graph<R>,
    s: &ParamStore<R>,
    heads: &DsslHeads,
    lm: &TinyLm,
    vocab: &Vocab,
    encoder_features: &MultiLevelFeatures,
    normal_text: Option<&str>,
) -> Result<Var> {
    let text = normal_text.ok_or_else(|| Error::contract("semantic token needs a normal-scene text"))?;
    let z = global_normalized(g, s, &heads.g_beta_enc, encoder_features.last())?;
    let visual = heads.psi_proj.forward(g, s, z)?;
    let (_, t) = lm.embed_text(g, s, vocab, text)?;
    let d = g.shape(t)[0];
    let t = g.reshape(t, &[1, d])?;
    let pi = heads.meta.forward(g, s, t)?;
    g.add(visual, pi)
}

/// LLM-space patch tokens `T_v^j`, `[boxes, C_t]`: each crop is resized to
/// the encoder input, encoded, projected and mean-pooled.
pub fn patch_tokens_llm<R: Real>(
    g: &mut Graph<R>,
    s: &ParamStore<R>,
    image: &Tensor<R>,
    boxes: &[PatchBox],
    encoder: &VisualEncoder,
    projector: &Projector,
) -> Result<Var> {
    let size = encoder.cfg.image_size;
    let mut rows = Vec::with_capacity(boxes.len());
    for b in boxes {
        let crop = crop_resize(image, b, size)?;
        let x = g.constant(crop)?;
        let feats = encoder.encode(g, s, x)?;
        let tokens = projector.project(g, s, &feats)?;
        let mean = g.mean_axis(tokens, 0)?;
        let d = g.shape(mean)[0];
        rows.push(g.reshape(mean, &[1, d])?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat(&rows, 0)
    }
}
