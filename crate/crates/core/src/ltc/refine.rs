use super::{grid_side, token_dims};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numcore::{Graph, ParamStore, Real, Var};

/// Region-restricted cross-attention from coarse queries to one fine level.
#[derive(Clone, Debug)]
pub struct CoarseToFine {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub d: usize,
    pub rho: usize,
}

/// Row-major fine-token indices of each coarse cell's `rho x rho` region.
pub fn region_indices(coarse_side: usize, rho: usize) -> Vec<usize> {
    let fine_side = coarse_side * rho;
    let mut idx = Vec::with_capacity(coarse_side * coarse_side * rho * rho);
    for ci in 0..coarse_side {
        for cj in 0..coarse_side {
            for di in 0..rho {
                for dj in 0..rho {
                    idx.push((ci * rho + di) * fine_side + cj * rho + dj);
                }
            }
        }
    }
    idx
}

impl CoarseToFine {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        c: usize,
        d: usize,
        rho: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, seed, &format!("{name}.q"), c, d, true)?,
            k: Linear::new(store, seed, &format!("{name}.k"), c, d, true)?,
            v: Linear::new(store, seed, &format!("{name}.v"), c, c, true)?,
            d,
            rho,
        })
    }

    /// `coarse [M, C]` attends to `fine [N, C]`, `N = M * rho^2`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, coarse: Var, fine: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, s, coarse, fine)?.0)
    }

    /// Also returns the `[M, 1, rho^2]` attention weights.
    pub fn forward_with_weights<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        coarse: Var,
        fine: Var,
    ) -> Result<(Var, Var)> {
        let (m, c) = token_dims(g, coarse, "coarse_to_fine")?;
        let (n, cf) = token_dims(g, fine, "coarse_to_fine")?;
        let cs = grid_side(m, "coarse_to_fine")?;
        let fs = grid_side(n, "coarse_to_fine")?;
        if cf != c || fs != cs * self.rho {
            return Err(Error::shape(format!(
                "coarse_to_fine: {cs}x{cs}x{c} coarse grid has no rho={} region map onto {fs}x{fs}x{cf}",
                self.rho
            )));
        }
        let r2 = self.rho * self.rho;
        let idx = region_indices(cs, self.rho);
        let q = self.q.forward(g, s, coarse)?;
        let q = g.reshape(q, &[m, 1, self.d])?;
        let k = self.k.forward(g, s, fine)?;
        let k = g.gather_rows(k, &idx)?;
        let k = g.reshape(k, &[m, r2, self.d])?;
        let v = self.v.forward(g, s, fine)?;
        let v = g.gather_rows(v, &idx)?;
        let v = g.reshape(v, &[m, r2, c])?;
        let scores = g.bmm(q, k, true)?;
        let weights = g.softmax(scores, 2, (self.d as f64).sqrt())?;
        let out = g.bmm(weights, v, false)?;
        let out = g.reshape(out, &[m, c])?;
        Ok((out, weights))
    }
}

/// Channel concatenation of `n` per-level values followed by one linear map
/// back to `C`. The map starts at zero so the refinement starts switched off.
#[derive(Clone, Debug)]
pub struct LevelIntegration {
    pub linear: Linear,
    pub n: usize,
}

impl LevelIntegration {
    pub fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, name: &str, c: usize, n: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::zeros(store, seed, name, n * c, c, true)?,
            n,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, levels: &[Var]) -> Result<Var> {
        if levels.len() != self.n {
            return Err(Error::contract(format!(
                "integrate_levels: expected {} levels, got {}",
                self.n,
                levels.len()
            )));
        }
        let cat = if levels.len() == 1 {
            levels[0]
        } else {
            g.concat(levels, 1)?
        };
        self.linear.forward(g, s, cat)
    }
}
