//! Small parameterised layers shared by the model components.
//!
//! Layers only hold [`ParamId`]s, so the same layer value drives a 32-bit
//! training store and its 64-bit cast used for gradient verification.

use crate::numcore::{named_rng, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use crate::Result;

fn param<R: Real>(store: &mut ParamStore<R>, seed: u64, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
    let mut rng = named_rng(seed, &name);
    store.add_init(name, shape, init, &mut rng)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::with_init(store, seed, name, din, dout, bias, Init::FanIn { fan_in: din })
    }

    pub fn zeros<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::with_init(store, seed, name, din, dout, bias, Init::Zeros)
    }

    pub fn with_init<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let w = param(store, seed, format!("{name}.w"), &[din, dout], init)?;
        let b = if bias {
            Some(param(store, seed, format!("{name}.b"), &[dout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b, din, dout })
    }

    /// Applies the layer to `[n, din]` rows.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: param(store, seed, format!("{name}.g"), &[d], Init::Ones)?,
            beta: param(store, seed, format!("{name}.b"), &[d], Init::Zeros)?,
        })
    }

    pub fn zero_gain<R: Real>(store: &mut ParamStore<R>, seed: u64, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: param(store, seed, format!("{name}.g"), &[d], Init::Zeros)?,
            beta: param(store, seed, format!("{name}.b"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Linear, ReLU, linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, seed, &format!("{name}.fc1"), din, hidden, true)?,
            fc2: Linear::new(store, seed, &format!("{name}.fc2"), hidden, dout, true)?,
        })
    }

    /// Same shape, but the output layer starts at zero.
    pub fn zero_out<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, seed, &format!("{name}.fc1"), din, hidden, true)?,
            fc2: Linear::zeros(store, seed, &format!("{name}.fc2"), hidden, dout, true)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, s, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, s, h)
    }
}

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub d: usize,
}

impl Attention {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        dq: usize,
        dkv: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, seed, &format!("{name}.q"), dq, d, true)?,
            k: Linear::new(store, seed, &format!("{name}.k"), dkv, d, true)?,
            v: Linear::new(store, seed, &format!("{name}.v"), dkv, d, true)?,
            o: Linear::new(store, seed, &format!("{name}.o"), d, dq, true)?,
            d,
        })
    }

    /// `queries [nq, dq]` attend over `context [nk, dkv]`. `mask` is an
    /// additive `[nq, nk]` constant (use a large negative value to block).
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        queries: Var,
        context: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(g, s, queries)?;
        let k = self.k.forward(g, s, context)?;
        let v = self.v.forward(g, s, context)?;
        let scores = g.matmul_t(q, false, k, true)?;
        let scores = g.scale(scores, 1.0 / (self.d as f64).sqrt())?;
        let scores = match mask {
            Some(m) => g.add(scores, m)?,
            None => scores,
        };
        let attn = g.softmax(scores, 1, 1.0)?;
        let out = g.matmul(attn, v)?;
        self.o.forward(g, s, out)
    }
}

/// Additive causal mask: 0 on and below the diagonal, `-1e9` above.
pub fn causal_mask<R: Real>(n: usize) -> Tensor<R> {
    let mut data = vec![R::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = R::lit(-1e9);
        }
    }
    Tensor::new(&[n, n], data).expect("square mask")
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, seed, &format!("{name}.ln1"), d)?,
            attn: Attention::new(store, seed, &format!("{name}.attn"), d, d, d)?,
            ln2: LayerNorm::new(store, seed, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(store, seed, &format!("{name}.mlp"), d, 2 * d, d)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let h = self.attn.forward(g, s, h, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, s, x)?;
        let h = self.mlp.forward(g, s, h)?;
        g.add(x, h)
    }
}

/// 2-D convolution over HWC maps with `[k, k, cin, cout]` weights.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        seed: u64,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        zero: bool,
    ) -> Result<Self> {
        let init = if zero {
            Init::Zeros
        } else {
            Init::He { fan_in: k * k * cin }
        };
        Ok(Self {
            w: param(store, seed, format!("{name}.w"), &[k, k, cin, cout], init)?,
            b: param(store, seed, format!("{name}.b"), &[cout], Init::Zeros)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// conv - norm - relu - conv, plus the identity skip.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm: LayerNorm,
    pub conv2: Conv,
}

impl ResBlock {
    /// With `zero_last` the block starts as the identity map.
    pub fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, name: &str, c: usize, zero_last: bool) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(store, seed, &format!("{name}.conv1"), 3, c, c, 1, false)?,
            norm: LayerNorm::new(store, seed, &format!("{name}.norm"), c)?,
            conv2: Conv::new(store, seed, &format!("{name}.conv2"), 3, c, c, 1, zero_last)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, s: &ParamStore<R>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, s, x)?;
        let h = self.norm.forward(g, s, h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, s, h)?;
        g.add(x, h)
    }
}
