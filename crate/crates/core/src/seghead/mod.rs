//! Embedding-as-mask segmentation head and the training objective.
//!
//! The last-layer hidden state at the `<seg>` position is projected by
//! `gamma` into a prompt, which a small two-way decoder turns into a mask
//! over backbone features.

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::encoders::{BackboneFeatures, TokenSequence, BACKBONE_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub txt: f64,
    pub seg: f64,
    pub pbsd: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            txt: 1.0,
            seg: 1.0,
            pbsd: 0.5,
            bce: 2.0,
            dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.txt, self.seg, self.pbsd, self.bce, self.dice];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

/// Decoder prompt taken from the `<seg>` hidden state.
#[derive(Clone, Copy, Debug)]
pub struct SegPrompt {
    /// `[1, C_f]`
    pub h: Var,
    /// Sequence position of the `<seg>` token.
    pub position: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MaskPrediction {
    /// Full-resolution logits `[H, W]`.
    pub logits: Var,
    /// Logits on the backbone grid `[h, w]`.
    pub coarse: Var,
}

impl MaskPrediction {
    pub fn probs<R: Real>(&self, g: &mut Graph<R>) -> Result<Var> {
        g.sigmoid(self.logits)
    }
}

/// One two-way block: the prompt reads the features, then the features read
/// the prompt.
#[derive(Clone, Debug)]
struct TwoWayBlock {
    ln_p1: LayerNorm,
    prompt_to_feat: Attention,
    ln_p2: LayerNorm,
    mlp: Mlp,
    ln_f: LayerNorm,
    feat_to_prompt: Attention,
}

impl TwoWayBlock {
    fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            ln_p1: LayerNorm::new(store, seed, &format!("{name}.ln_p1"), c)?,
            prompt_to_feat: Attention::new(store, seed, &format!("{name}.p2f"), c, c, c)?,
            ln_p2: LayerNorm::new(store, seed, &format!("{name}.ln_p2"), c)?,
            mlp: Mlp::new(store, seed, &format!("{name}.mlp"), c, 2 * c, c)?,
            ln_f: LayerNorm::new(store, seed, &format!("{name}.ln_f"), c)?,
            feat_to_prompt: Attention::new(store, seed, &format!("{name}.f2p"), c, c, c)?,
        })
    }

    fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, p: Var, f: Var) -> Result<(Var, Var)> {
        let q = self.ln_p1.forward(g, s, p)?;
        let a = self.prompt_to_feat.forward(g, s, q, f, None)?;
        let p = g.add(p, a)?;
        let q = self.ln_p2.forward(g, s, p)?;
        let m = self.mlp.forward(g, s, q)?;
        let p = g.add(p, m)?;
        let q = self.ln_f.forward(g, s, f)?;
        let a = self.feat_to_prompt.forward(g, s, q, p, None)?;
        let f = g.add(f, a)?;
        Ok((p, f))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegHeadConfig {
    pub blocks: usize,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self { blocks: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct SegHead {
    /// `gamma`: LM width to backbone width.
    pub gamma: Mlp,
    pub input: Linear,
    blocks: Vec<TwoWayBlock>,
    pub channels: usize,
}

impl SegHead {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        cfg: &SegHeadConfig,
        lm_width: usize,
        channels: usize,
    ) -> Result<Self> {
        if cfg.blocks == 0 || channels == 0 {
            return Err(Error::Config(
                "mask decoder needs at least one block and channel".into(),
            ));
        }
        Ok(Self {
            gamma: Mlp::new(store, seed, "seg.gamma", lm_width, lm_width, channels)?,
            input: Linear::new(store, seed, "seg.input", channels, channels, true)?,
            blocks: (0..cfg.blocks)
                .map(|i| TwoWayBlock::new(store, seed, &format!("seg.block{i}"), channels))
                .collect::<Result<_>>()?,
            channels,
        })
    }

    /// Reads the hidden state at the first `<seg>` of `seq`. `None` when the
    /// sequence carries no `<seg>`.
    pub fn extract_seg_embedding<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        hidden: Var,
        seq: &TokenSequence,
    ) -> Result<Option<SegPrompt>> {
        let Some(position) = seq.seg_position() else {
            return Ok(None);
        };
        if g.shape(hidden).len() != 2 || g.shape(hidden)[0] != seq.len() {
            return Err(Error::shape(format!(
                "hidden states {:?} do not match a sequence of {}",
                g.shape(hidden),
                seq.len()
            )));
        }
        let row = g.gather_rows(hidden, &[position])?;
        let h = self.gamma.forward(g, s, row)?;
        Ok(Some(SegPrompt { h, position }))
    }

    /// Decodes a mask for an image of `img_h x img_w` pixels.
    pub fn decode_mask<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        prompt: &SegPrompt,
        f: &BackboneFeatures,
        img_h: usize,
        img_w: usize,
    ) -> Result<MaskPrediction> {
        if f.channels != self.channels || g.shape(prompt.h) != [1, self.channels] {
            return Err(Error::shape(format!(
                "mask decoder of width {} got features with {} channels and prompt {:?}",
                self.channels,
                f.channels,
                g.shape(prompt.h)
            )));
        }
        if f.h * BACKBONE_STRIDE != img_h || f.w * BACKBONE_STRIDE != img_w {
            return Err(Error::shape(format!(
                "feature grid {}x{} does not match a {img_h}x{img_w} image",
                f.h, f.w
            )));
        }
        let flat = g.reshape(f.f, &[f.h * f.w, f.channels])?;
        let mut feats = self.input.forward(g, s, flat)?;
        let mut p = prompt.h;
        for b in &self.blocks {
            (p, feats) = b.forward(g, s, p, feats)?;
        }
        let dots = g.matmul_t(feats, false, p, true)?;
        let dots = g.scale(dots, 1.0 / (self.channels as f64).sqrt())?;
        let coarse = g.reshape(dots, &[f.h, f.w])?;
        let grid = g.reshape(dots, &[f.h, f.w, 1])?;
        let pts = g.constant(upsample_points(f.h, f.w, img_h, img_w))?;
        let up = g.bilinear_sample(grid, pts)?;
        let logits = g.reshape(up, &[img_h, img_w])?;
        Ok(MaskPrediction { logits, coarse })
    }
}

/// Pixel-centre aligned source coordinates for resizing `h x w` to `oh x ow`.
fn upsample_points<R: Real>(h: usize, w: usize, oh: usize, ow: usize) -> Tensor<R> {
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut pts = Vec::with_capacity(oh * ow * 2);
    for y in 0..oh {
        for x in 0..ow {
            pts.push(R::lit((y as f64 + 0.5) * sy - 0.5));
            pts.push(R::lit((x as f64 + 0.5) * sx - 0.5));
        }
    }
    Tensor::new(&[oh * ow, 2], pts).expect("upsample grid")
}

fn check_gt<R: Real>(g: &Graph<R>, probs: Var, gt: &Tensor<R>) -> Result<()> {
    if g.shape(probs) != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and mask {:?} differ",
            g.shape(probs),
            gt.shape()
        )));
    }
    if gt.data().iter().any(|&v| v != R::zero() && v != R::one()) {
        return Err(Error::contract("ground-truth mask must be binary"));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy with probabilities clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_loss<R: Real>(g: &mut Graph<R>, probs: Var, gt: &Tensor<R>) -> Result<Var> {
    check_gt(g, probs, gt)?;
    let p = g.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let lp = g.ln(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let lq = g.ln(q)?;
    let pos = g.constant(gt.clone())?;
    let neg = g.constant(Tensor::from_f64(
        gt.shape(),
        &gt.data().iter().map(|v| 1.0 - v.as_f64()).collect::<Vec<_>>(),
    )?)?;
    let a = g.mul(pos, lp)?;
    let b = g.mul(neg, lq)?;
    let t = g.add(a, b)?;
    let m = g.mean(t)?;
    g.scale(m, -1.0)
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss<R: Real>(g: &mut Graph<R>, probs: Var, gt: &Tensor<R>) -> Result<Var> {
    check_gt(g, probs, gt)?;
    let gsum: f64 = gt.data().iter().map(|v| v.as_f64()).sum();
    let gv = g.constant(gt.clone())?;
    let inter = g.mul(probs, gv)?;
    let inter = g.sum(inter)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let psum = g.sum(probs)?;
    let den = g.add_scalar(psum, gsum + DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// `bce * BCE + dice * DICE` on the sigmoid of `pred`.
pub fn seg_loss<R: Real>(g: &mut Graph<R>, pred: &MaskPrediction, gt: &Tensor<R>, w: &LossWeights) -> Result<Var> {
    let probs = pred.probs(g)?;
    let bce = bce_loss(g, probs, gt)?;
    let dice = dice_loss(g, probs, gt)?;
    let a = g.scale(bce, w.bce)?;
    let b = g.scale(dice, w.dice)?;
    g.add(a, b)
}

/// Mean next-token cross-entropy over the answer span of `seq`.
pub fn text_loss<R: Real>(g: &mut Graph<R>, logits: Var, seq: &TokenSequence) -> Result<Var> {
    let n = seq.len();
    if seq.answer_start == 0 || seq.answer_start >= n {
        return Err(Error::contract(
            "text loss needs a non-empty answer span after a prefix",
        ));
    }
    if g.shape(logits).len() != 2 || g.shape(logits)[0] != n {
        return Err(Error::shape(format!(
            "logits {:?} do not match a sequence of {n}",
            g.shape(logits)
        )));
    }
    let rows: Vec<usize> = (seq.answer_start - 1..n - 1).collect();
    let picked = g.gather_rows(logits, &rows)?;
    g.cross_entropy(picked, &seq.ids[seq.answer_start..])
}

/// Scalar loss components of one step. Absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub txt: Option<Var>,
    pub seg: Option<Var>,
    pub pbsd: Option<Var>,
}

/// Tags a non-finite failure while computing loss term `name` with that
/// name.
pub fn loss_term(name: &str, r: Result<Var>) -> Result<Var> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => {
            log::error!("loss term `{name}` became non-finite in `{op}`");
            Error::NonFiniteLoss(name.into())
        }
        e => e,
    })
}

/// `txt * L_txt + seg * L_seg + pbsd * L_pbsd`. Terms with zero weight are
/// left out of the graph.
pub fn total_loss<R: Real>(g: &mut Graph<R>, c: &LossComponents, w: &LossWeights) -> Result<Var> {
    let mut total = None;
    for (name, term, weight) in [("txt", c.txt, w.txt), ("seg", c.seg, w.seg), ("pbsd", c.pbsd, w.pbsd)] {
        let Some(v) = term else { continue };
        if !g.shape(v).is_empty() {
            return Err(Error::shape(format!("loss component `{name}` is not a scalar")));
        }
        if !g.value(v).item().as_f64().is_finite() {
            return Err(Error::NonFiniteLoss(name.into()));
        }
        if weight == 0.0 {
            continue;
        }
        let t = g.scale(v, weight)?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.scalar(0.0),
    }
}
