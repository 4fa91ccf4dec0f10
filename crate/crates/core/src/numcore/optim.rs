//! AdamW with warmup + cosine learning-rate decay.

use std::f64::consts::PI;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamW<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(store: &ParamStore<R>, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![R::zero(); p.value().numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients in `store`. Decoupled weight decay
    /// is applied to matrices and kernels only (rank >= 2).
    pub fn step(&mut self, store: &mut ParamStore<R>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let (one_b1, one_b2) = (R::lit(1.0 - self.beta1), R::lit(1.0 - self.beta2));
        let step_size = R::lit(lr / bc1);
        let inv_bc2 = R::lit(1.0 / bc2);
        let eps = R::lit(self.eps);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let decay = if p.value.rank() >= 2 {
                R::lit(1.0 - lr * self.weight_decay)
            } else {
                R::one()
            };
            let value = std::sync::Arc::make_mut(&mut p.value);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in value.data_mut().iter_mut().enumerate() {
                let g = p.grad[k];
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let denom = (v[k] * inv_bc2).sqrt() + eps;
                *x = *x * decay - step_size * m[k] / denom;
            }
        }
    }

    /// Moments and step counter as a parameter store (for checkpointing).
    pub fn state(&self, model: &ParamStore<R>) -> Result<ParamStore<R>> {
        let mut s = ParamStore::new();
        s.add("step", Tensor::scalar(R::lit(self.step as f64)))?;
        for (i, (_, p)) in model.iter().enumerate() {
            let shape = p.value().shape();
            s.add(format!("m.{}", p.name()), Tensor::new(shape, self.m[i].clone())?)?;
            s.add(format!("v.{}", p.name()), Tensor::new(shape, self.v[i].clone())?)?;
        }
        Ok(s)
    }

    pub fn load_state(&mut self, model: &ParamStore<R>, state: &ParamStore<R>) -> Result<()> {
        let get = |name: &str| {
            state
                .id(name)
                .map(|id| state.value(id))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{name}`")))
        };
        self.step = get("step")?.item().as_f64() as u64;
        for (i, (_, p)) in model.iter().enumerate() {
            let m = get(&format!("m.{}", p.name()))?;
            let v = get(&format!("v.{}", p.name()))?;
            if m.numel() != self.m[i].len() || v.numel() != self.v[i].len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state shape mismatch for `{}`",
                    p.name()
                )));
            }
            self.m[i] = m.data().to_vec();
            self.v[i] = v.data().to_vec();
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_frac` of steps, then cosine decay to zero.
pub fn cosine_lr(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let total = total.max(1);
    let warmup = ((total as f64) * warmup_frac).round() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_shape() {
        let total = 100;
        assert!((cosine_lr(0, total, 1.0, 0.05) - 0.2).abs() < 1e-12);
        assert!((cosine_lr(4, total, 1.0, 0.05) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(5, total, 1.0, 0.05) - 1.0).abs() < 1e-12);
        let mid = cosine_lr(52, total, 1.0, 0.05);
        assert!(mid > 0.45 && mid < 0.55);
        assert!(cosine_lr(99, total, 1.0, 0.05) < 0.01);
        for s in 5..99 {
            assert!(cosine_lr(s + 1, total, 1.0, 0.05) <= cosine_lr(s, total, 1.0, 0.05));
        }
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..500 {
            store.zero_grad();
            let x = store.value(id).data().to_vec();
            store.accumulate_grad(id, &[2.0 * x[0], 2.0 * x[1]]);
            opt.step(&mut store, 0.05);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
