use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Tensor, Var};

/// Probabilities below this are clamped before the logarithm.
pub const Q_FLOOR: f64 = 1e-12;

/// A distribution over queue entries, indexed in queue order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution {
    pub probs: Vec<f64>,
}

impl SimilarityDistribution {
    pub fn from_row<R: Real>(t: &Tensor<R>, row: usize) -> Self {
        Self {
            probs: t.row(row).iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// `softmax(x . entries^T / tau)` per row: `x [b, d]`, `entries [m, d]`,
/// result `[b, m]`.
pub fn similarity<R: Real>(g: &mut Graph<R>, x: Var, entries: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let dots = g.matmul_t(x, false, entries, true)?;
    g.softmax(dots, 1, tau)
}

/// `(1 / b) * sum_j sum_{t in positives} -p[j, t] * ln q[j, t]` with `p`
/// detached and `q` clamped at [`Q_FLOOR`].
pub fn pbsd_loss<R: Real>(g: &mut Graph<R>, p: Var, q: Var, positives: &[usize]) -> Result<Var> {
    if g.shape(p) != g.shape(q) || g.shape(p).len() != 2 {
        return Err(Error::shape(format!(
            "pbsd_loss: p {:?} and q {:?} must be equal [boxes, entries]",
            g.shape(p),
            g.shape(q)
        )));
    }
    if positives.is_empty() {
        return Err(Error::contract("pbsd_loss: empty positive set"));
    }
    let (b, m) = (g.shape(p)[0], g.shape(p)[1]);
    if let Some(&bad) = positives.iter().find(|&&t| t >= m) {
        return Err(Error::shape(format!(
            "pbsd_loss: positive index {bad} outside {m} entries"
        )));
    }
    if g.value(q).data().iter().any(|&v| v.as_f64() < Q_FLOOR) {
        log::warn!("pbsd_loss: text-visual probability below {Q_FLOOR:e}, clamping");
    }
    let mut mask = vec![R::zero(); b * m];
    for j in 0..b {
        for &t in positives {
            mask[j * m + t] = R::one();
        }
    }
    let mask = g.constant(Tensor::new(&[b, m], mask)?)?;
    let p = g.detach(p);
    let w = g.mul(p, mask)?;
    let q = g.clamp(q, Q_FLOOR, 1.0)?;
    let logq = g.ln(q)?;
    let terms = g.mul(w, logq)?;
    let total = g.sum(terms)?;
    g.scale(total, -1.0 / b as f64)
}
