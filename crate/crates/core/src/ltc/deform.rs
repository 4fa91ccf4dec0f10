use super::{grid_side, token_dims};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};

/// Integer `(row, col)` kernel offsets for `k` taps on a raster of width
/// `ceil(sqrt(k))`, centred for odd widths: `k = 4` gives the 2x2 block
/// `{0, 1}^2`, `k = 9` gives `{-1, 0, 1}^2`.
pub fn kernel_offsets(k: usize) -> Vec<(f64, f64)> {
    let w = (k as f64).sqrt().ceil() as usize;
    let c = ((w - 1) / 2) as f64;
    (0..k).map(|t| ((t / w) as f64 - c, (t % w) as f64 - c)).collect()
}

/// Deformable sampling: each query at grid position `p` reads `K` taps at
/// `p + stride * (r_k + dp_k)`, where `dp` comes from a linear head on the
/// query, and mixes them with per-tap weights `W_k`.
#[derive(Clone, Debug)]
pub struct DeformableLayer {
    pub offset: Linear,
    /// `[K * C, C]`: row block `k` is `W_k`.
    pub mix: Linear,
    pub k: usize,
    pub stride: f64,
}

impl DeformableLayer {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        c: usize,
        k: usize,
        stride: f64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("deformable layer needs at least one tap".into()));
        }
        Ok(Self {
            offset: Linear::zeros(store, seed, &format!("{name}.offset"), c, 2 * k, true)?,
            mix: Linear::new(store, seed, &format!("{name}.mix"), k * c, c, true)?,
            k,
            stride,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var) -> Result<Var> {
        let offsets = self.offset.forward(g, s, x)?;
        self.forward_with_offsets(g, s, x, offsets)
    }

    /// Same as [`forward`](Self::forward) with externally supplied `[N, 2K]`
    /// offsets, laid out as `(row, col)` pairs per tap.
    pub fn forward_with_offsets<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        x: Var,
        offsets: Var,
    ) -> Result<Var> {
        let (n, c) = token_dims(g, x, "deformable layer")?;
        let side = grid_side(n, "deformable layer")?;
        if g.shape(offsets) != [n, 2 * self.k] {
            return Err(Error::shape(format!(
                "deformable layer: offsets {:?}, expected [{n}, {}]",
                g.shape(offsets),
                2 * self.k
            )));
        }
        let base = g.constant(self.reference_points(side))?;
        let off = g.reshape(offsets, &[n * self.k, 2])?;
        let off = g.scale(off, self.stride)?;
        let pts = g.add(base, off)?;
        let grid = g.reshape(x, &[side, side, c])?;
        let taps = g.bilinear_sample(grid, pts)?;
        let taps = g.reshape(taps, &[n, self.k * c])?;
        self.mix.forward(g, s, taps)
    }

    /// `[N * K, 2]` points `p + stride * r_k` in query-major order.
    pub fn reference_points<R: Real>(&self, side: usize) -> Tensor<R> {
        let kern = kernel_offsets(self.k);
        let mut pts = Vec::with_capacity(side * side * self.k * 2);
        for i in 0..side {
            for j in 0..side {
                for &(dr, dc) in &kern {
                    pts.push(R::lit(i as f64 + self.stride * dr));
                    pts.push(R::lit(j as f64 + self.stride * dc));
                }
            }
        }
        Tensor::new(&[side * side * self.k, 2], pts).expect("point count")
    }
}
