//! Locality-enhanced token compression: turns an `N`-token encoder grid into
//! `M = N / rho^2` LLM-space tokens.
//!
//! Pipeline: the last encoder level goes through a local-context learner
//! (self-attention plus deformable sampling) and a residual downsampler. Each
//! coarse token then attends to its own `rho x rho` region of several earlier
//! encoder levels, and the fused result is added back before the final
//! projection to the language-model width.

mod deform;
mod refine;


use serde::{Deserialize, Serialize};

pub use deform::{kernel_offsets, DeformableLayer};
pub use refine::{CoarseToFine, LevelIntegration};

use crate::encoders::MultiLevelFeatures;
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp, ResBlock};
use crate::numcore::{Graph, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResamplerConfig {
    /// Per-axis downsampling rate.
    pub rho: usize,
    /// Blocks in the local-context learner, and residual blocks on each side
    /// of the pooling step.
    pub lc: usize,
    /// Number of earlier encoder levels fused by the refinement.
    pub n: usize,
    /// Deformable taps per query.
    pub k: usize,
    /// Sampling stride applied to kernel and learned offsets.
    pub stride: f64,
    /// Query/key width of the coarse-to-fine attention.
    pub d: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            rho: 2,
            lc: 2,
            n: 4,
            k: 4,
            stride: 1.0,
            d: 64,
        }
    }
}

impl ResamplerConfig {
    /// Checks the config against an encoder with `levels` levels on a
    /// `side x side` grid.
    pub fn validate(&self, side: usize, levels: usize) -> Result<()> {
        if self.rho == 0 || side % self.rho != 0 {
            return Err(Error::Config(format!(
                "rho = {} must be >= 1 and divide the grid side {side}",
                self.rho
            )));
        }
        if self.n == 0 || self.n + 2 > levels {
            return Err(Error::Config(format!(
                "n = {} must be in 1..={} for {levels} encoder levels",
                self.n,
                levels.saturating_sub(2)
            )));
        }
        if self.k == 0 || self.d == 0 {
            return Err(Error::Config("k and d must be positive".into()));
        }
        if !(self.stride.is_finite() && self.stride > 0.0) {
            return Err(Error::Config(format!("stride must be positive, got {}", self.stride)));
        }
        Ok(())
    }

    pub fn output_tokens(&self, n_tokens: usize) -> usize {
        n_tokens / (self.rho * self.rho)
    }
}

/// Side of a square token grid.
pub(crate) fn grid_side(n: usize, what: &str) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n == 0 {
        return Err(Error::shape(format!("{what}: {n} tokens do not form a square grid")));
    }
    Ok(side)
}

#[derive(Clone, Debug)]
struct LearnerBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    deform: DeformableLayer,
}

/// The full projector.
#[derive(Clone, Debug)]
pub struct Ltc {
    pub cfg: ResamplerConfig,
    pub channels: usize,
    learner: Vec<LearnerBlock>,
    pre_pool: Vec<ResBlock>,
    post_pool: Vec<ResBlock>,
    refine: Vec<CoarseToFine>,
    fuse: LevelIntegration,
    out: Linear,
}

/// Intermediate values of one projector pass.
#[derive(Clone, Debug)]
pub struct LtcTrace {
    /// `I_v` after the local-context learner, `[N, C]`.
    pub learned: Var,
    /// Downsampled coarse representation, `[M, C]`.
    pub coarse: Var,
    /// Per-level refinement values, `[M, C]` each.
    pub per_level: Vec<Var>,
    /// Fused refinement, `[M, C]`.
    pub fused: Var,
    /// `coarse + fused`, `[M, C]`.
    pub enhanced: Var,
    /// Final tokens at LM width, `[M, C_t]`.
    pub tokens: Var,
}

impl Ltc {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        cfg: &ResamplerConfig,
        channels: usize,
        lm_width: usize,
    ) -> Result<Self> {
        let c = channels;
        let learner = (0..cfg.lc)
            .map(|i| {
                let p = format!("ltc.learner{i}");
                Ok(LearnerBlock {
                    ln1: LayerNorm::new(store, seed, &format!("{p}.ln1"), c)?,
                    attn: Attention::new(store, seed, &format!("{p}.attn"), c, c, c)?,
                    ln2: LayerNorm::new(store, seed, &format!("{p}.ln2"), c)?,
                    deform: DeformableLayer::new(store, seed, &format!("{p}.deform"), c, cfg.k, cfg.stride)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pre_pool = (0..cfg.lc)
            .map(|i| ResBlock::new(store, seed, &format!("ltc.down.pre{i}"), c, true))
            .collect::<Result<Vec<_>>>()?;
        let post_pool = (0..cfg.lc)
            .map(|i| ResBlock::new(store, seed, &format!("ltc.down.post{i}"), c, true))
            .collect::<Result<Vec<_>>>()?;
        let refine = (0..cfg.n)
            .map(|i| CoarseToFine::new(store, seed, &format!("ltc.refine{i}"), c, cfg.d, cfg.rho))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            channels: c,
            learner,
            pre_pool,
            post_pool,
            refine,
            fuse: LevelIntegration::new(store, seed, "ltc.fuse", c, cfg.n)?,
            out: Linear::new(store, seed, "ltc.out", c, lm_width, true)?,
        })
    }

    pub fn fuse_layer(&self) -> &LevelIntegration {
        &self.fuse
    }

    pub fn deformable_layers(&self) -> Vec<&DeformableLayer> {
        self.learner.iter().map(|b| &b.deform).collect()
    }

    /// Self-attention then deformable sampling, `lc` times, on a square grid.
    pub fn local_context_learn<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var) -> Result<Var> {
        let (n, _) = token_dims(g, x, "local_context_learn")?;
        grid_side(n, "local_context_learn")?;
        let mut x = x;
        for b in &self.learner {
            let h = b.ln1.forward(g, s, x)?;
            let h = b.attn.forward(g, s, h, h, None)?;
            x = g.add(x, h)?;
            let h = b.ln2.forward(g, s, x)?;
            let h = b.deform.forward(g, s, h)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Residual blocks, adaptive pooling by `rho`, residual blocks.
    pub fn spatial_downsample<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var) -> Result<Var> {
        let (n, c) = token_dims(g, x, "spatial_downsample")?;
        let side = grid_side(n, "spatial_downsample")?;
        let rho = self.cfg.rho;
        if side % rho != 0 {
            return Err(Error::shape(format!(
                "spatial_downsample: rho {rho} does not divide side {side}"
            )));
        }
        let mut h = g.reshape(x, &[side, side, c])?;
        for b in &self.pre_pool {
            h = b.forward(g, s, h)?;
        }
        let out = side / rho;
        h = g.adaptive_avg_pool(h, out, out)?;
        for b in &self.post_pool {
            h = b.forward(g, s, h)?;
        }
        g.reshape(h, &[out * out, c])
    }

    pub fn project<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, feats: &MultiLevelFeatures) -> Result<Var> {
        Ok(self.trace(g, s, feats)?.tokens)
    }

    pub fn trace<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, feats: &MultiLevelFeatures) -> Result<LtcTrace> {
        let l = feats.levels.len();
        if feats.grid_h != feats.grid_w {
            return Err(Error::shape("ltc: encoder grid must be square"));
        }
        self.cfg
            .validate(feats.grid_h, l)
            .map_err(|e| Error::shape(e.to_string()))?;
        let learned = self.local_context_learn(g, s, feats.last())?;
        let coarse = self.spatial_downsample(g, s, learned)?;
        // Levels L-n-1 ..= L-2, oldest first.
        let first = l - self.cfg.n - 1;
        let per_level = self
            .refine
            .iter()
            .zip(&feats.levels[first..l - 1])
            .map(|(r, &fine)| r.forward(g, s, coarse, fine))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse.forward(g, s, &per_level)?;
        let enhanced = g.add(coarse, fused)?;
        let tokens = self.out.forward(g, s, enhanced)?;
        Ok(LtcTrace {
            learned,
            coarse,
            per_level,
            fused,
            enhanced,
            tokens,
        })
    }
}

pub(crate) fn token_dims<R: Real>(g: &Graph<R>, x: Var, what: &str) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [n, c] => Ok((n, c)),
        ref s => Err(Error::shape(format!("{what}: expected [N, C] tokens, got {s:?}"))),
    }
}

/// Baseline projector: average-pool to the same token count, then a
/// two-layer MLP to the LM width.
#[derive(Clone, Debug)]
pub struct MlpProjector {
    pub rho: usize,
    mlp: Mlp,
}

impl MlpProjector {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        rho: usize,
        channels: usize,
        lm_width: usize,
    ) -> Result<Self> {
        if rho == 0 {
            return Err(Error::Config("rho must be >= 1".into()));
        }
        Ok(Self {
            rho,
            mlp: Mlp::new(store, seed, "ltc.mlp", channels, lm_width, lm_width)?,
        })
    }

    pub fn project<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, feats: &MultiLevelFeatures) -> Result<Var> {
        let x = feats.last();
        let (n, c) = token_dims(g, x, "mlp projector")?;
        let side = grid_side(n, "mlp projector")?;
        if side % self.rho != 0 {
            return Err(Error::shape(format!(
                "mlp projector: rho {} does not divide {side}",
                self.rho
            )));
        }
        let out = side / self.rho;
        let h = g.reshape(x, &[side, side, c])?;
        let h = g.adaptive_avg_pool(h, out, out)?;
        let h = g.reshape(h, &[out * out, c])?;
        self.mlp.forward(g, s, h)
    }
}

/// Either projector, selected by configuration.
#[derive(Clone, Debug)]
pub enum Projector {
    Ltc(Ltc),
    Mlp(MlpProjector),
}

impl Projector {
    pub fn project<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, feats: &MultiLevelFeatures) -> Result<Var> {
        match self {
            Projector::Ltc(p) => p.project(g, s, feats),
            Projector::Mlp(p) => p.project(g, s, feats),
        }
    }
}
