use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal {
        std: f64,
    },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn {
        fan_in: usize,
    },
    /// Kaiming normal for ReLU layers.
    He {
        fan_in: usize,
    },
}

impl Init {
    pub fn sample<R: Real>(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor<R> {
        let n: usize = shape.iter().product();
        let data: Vec<R> = match *self {
            Init::Zeros => vec![R::zero(); n],
            Init::Ones => vec![R::one(); n],
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("std must be finite");
                (0..n).map(|_| R::lit(d.sample(rng))).collect()
            }
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| R::lit(rng.gen_range(-bound..bound))).collect()
            }
            Init::He { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                (0..n).map(|_| R::lit(d.sample(rng))).collect()
            }
        };
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// Deterministic per-name RNG stream, so a component's initial weights do not
/// depend on which other components were built before it.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Clone, Debug)]
pub struct Parameter<R: Real> {
    pub(crate) name: String,
    pub(crate) value: Arc<Tensor<R>>,
    pub(crate) grad: Vec<R>,
    pub(crate) requires_grad: bool,
}

impl<R: Real> Parameter<R> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub fn grad(&self) -> &[R] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Named trainable tensors with gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real> {
    params: Vec<Parameter<R>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Param(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: vec![R::zero(); value.numel()],
            value: Arc::new(value),
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn add_init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let t = init.sample(shape, rng);
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<R>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &[R] {
        &self.params[id.0].grad
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = R::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[R]) {
        let p = &mut self.params[id.0];
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += *d;
        }
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm_sq("").sqrt();
        if norm > max_norm && norm > 0.0 {
            let c = R::lit(max_norm / norm);
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= c);
            }
        }
        norm
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<R>] {
        &mut self.params
    }

    /// Squared L2 norm of all gradients of parameters whose name starts with `prefix`.
    pub fn grad_norm_sq(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: p.grad.iter().map(|g| S::lit(g.as_f64())).collect(),
                    requires_grad: p.requires_grad,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn named_rng_is_stable_per_name() {
        let a: u64 = named_rng(7, "enc.w").gen();
        let b: u64 = named_rng(7, "enc.w").gen();
        let c: u64 = named_rng(7, "enc.b").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
