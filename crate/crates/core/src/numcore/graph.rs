//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output and whatever it needs
//! for the backward pass. Nodes are stored in creation order, which is a
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied operation: receives the input values, the
/// output value and the output gradient, returns one gradient per input.
pub type CustomBackward<R> = Box<dyn Fn(&[&Tensor<R>], &Tensor<R>, &[R]) -> Vec<Vec<R>>>;

enum Op<R> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: R,
        hi: R,
    },
    Softmax {
        x: Var,
        axis: usize,
        inv_temp: R,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<R>,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    BilinearSample {
        grid: Var,
        points: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<R>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<R>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<R>,
    },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::GatherRows { .. } => "gather_rows",
            Op::Concat { .. } => "concat",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<R> {
    value: Arc<Tensor<R>>,
    op: Op<R>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across backward calls.
    grad: Option<Vec<R>>,
}

/// A recorded computation. One graph per forward pass.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    bound: HashMap<ParamId, Var>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// How a right-hand operand lines up with the left one in elementwise ops.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    /// The right operand repeats along the left operand's leading axis.
    Leading(usize),
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(R::lit(value)))
    }

    /// Binds a stored parameter. Binding the same parameter twice returns the
    /// same node, so every use contributes to one gradient.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.param(id);
        self.nodes.push(Node {
            value: store.value_arc(id),
            op: Op::Leaf { param: Some(id) },
            requires_grad: p.requires_grad(),
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// A gradient-free copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ----

    fn bcast(&self, a: Var, b: Var, op: &str) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if !sa.is_empty() && &sa[1..] == sb {
            Ok(Bcast::Leading(self.value(b).numel()))
        } else {
            Err(Error::shape(format!("{op}: incompatible shapes {sa:?} and {sb:?}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(R, R) -> R, op: fn(Var, Var) -> Op<R>) -> Result<Var> {
        let mode = self.bcast(a, b, name)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<R> = match mode {
            Bcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Leading(inner) => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % inner]))
                .collect(),
        };
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, op(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = R::lit(c);
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = R::lit(c);
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| e + c).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect());
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |e| e.max(R::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |e| e.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |e| e.ln(), Op::Ln(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (R::lit(lo), R::lit(hi));
        self.unary(x, |e| e.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    // ---- linear algebra ----

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    /// `op(a) · op(b)` for rank-2 operands with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dims differ ({:?}{} x {:?}{})",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" },
            )));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul_into(
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Batched product of `[bs, m, k]` with `[bs, k, n]` (or `[bs, n, k]` when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (bs, m, k) = match *self.shape(a) {
            [bs, m, k] => (bs, m, k),
            ref s => return Err(Error::shape(format!("bmm: lhs must be rank 3, got {s:?}"))),
        };
        let (bs2, k2, n) = match *self.shape(b) {
            [bs, r, c] if tb => (bs, c, r),
            [bs, r, c] => (bs, r, c),
            ref s => return Err(Error::shape(format!("bmm: rhs must be rank 3, got {s:?}"))),
        };
        if bs != bs2 || k != k2 {
            return Err(Error::shape(format!(
                "bmm: incompatible {:?} and {:?} (tb={tb})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![R::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::matmul_into(
                &ad[i * m * k..][..m * k],
                false,
                &bd[i * k * n..][..k * n],
                tb,
                m,
                k,
                n,
                &mut out[i * m * n..][..m * n],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![bs, m, n], out), Op::Bmm { a, b, tb }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let d = self.value(x).data();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// `x · w + b` on the last axis of a rank-2 input.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- reductions and normalisation ----

    fn check_axis(&self, x: Var, axis: usize, op: &str) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(format!("{op}: axis {axis} out of range for {s:?}")));
        }
        Ok(())
    }

    /// `softmax(x / temperature)` along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        if self.value(x).rank() == 0 {
            return Err(Error::shape("softmax over a scalar"));
        }
        self.check_axis(x, axis, "softmax")?;
        let v = self.value(x);
        let (outer, len, inner) = kernels::axis_split(v.shape(), axis);
        let inv_temp = R::lit(1.0 / temperature);
        let mut out = v.data().to_vec();
        kernels::softmax_strided(&mut out, outer, len, inner, inv_temp);
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis, inv_temp }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: R = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let v = self.value(x);
        let (outer, len, inner) = kernels::axis_split(v.shape(), axis);
        let d = v.data();
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                for (t, &s) in dst.iter_mut().zip(src) {
                    *t += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let len = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm over a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: affine params must be [{d}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = v.numel() / d;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = R::lit(eps);
        let inv_d = R::lit(1.0 / d as f64);
        let mut xhat = vec![R::zero(); v.numel()];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * d..][..d];
            let mean = row.iter().copied().sum::<R>() * inv_d;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<R>() * inv_d;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row-wise L2 normalisation over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("l2_normalize over a scalar"))?;
        let rows = v.numel() / d;
        let mut norms = vec![R::zero(); rows];
        let mut out = v.data().to_vec();
        let floor = R::lit(1e-12);
        for r in 0..rows {
            let row = &mut out[r * d..][..d];
            let n = row.iter().map(|&e| e * e).sum::<R>().sqrt().max(floor);
            norms[r] = n;
            row.iter_mut().for_each(|e| *e /= n);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norms }, rg)
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {n} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(format!("cross_entropy: target {t} >= {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_strided(&mut probs, n, c, 1, R::one());
        let floor = R::lit(f64::MIN_POSITIVE);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[i * c + t].max(floor).ln())
            .sum::<R>()
            / R::lit(n as f64);
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    // ---- spatial ----

    /// 2-D convolution of an `[H, W, Cin]` map with `[kh, kw, Cin, Cout]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (h, wd, cin) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::shape(format!("conv2d: input must be HWC, got {s:?}"))),
        };
        let (kh, kw, wcin, cout) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::shape(format!("conv2d: weight must be rank 4, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Param("conv2d: stride must be positive".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias must be [{cout}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let rows = geom.oh * geom.ow;
        let mut out = vec![R::zero(); rows * cout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * cout..][..cout].copy_from_slice(bd);
            }
        }
        kernels::matmul_into(
            &cols,
            false,
            self.value(w).data(),
            false,
            rows,
            geom.patch_len(),
            cout,
            &mut out,
            b.is_some(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(
            Tensor::from_parts(vec![geom.oh, geom.ow, cout], out),
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        )
    }

    /// Average-pools an `[H, W, C]` map onto an `out_h x out_w` grid.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::shape(format!("adaptive_avg_pool: expected HWC, got {s:?}"))),
        };
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::shape(format!(
                "adaptive_avg_pool: cannot pool {h}x{w} onto {out_h}x{out_w}"
            )));
        }
        let d = self.value(x).data();
        let mut out = vec![R::zero(); out_h * out_w * c];
        for oy in 0..out_h {
            let (y0, y1) = kernels::adaptive_bounds(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = kernels::adaptive_bounds(ox, w, out_w);
                let inv = R::lit(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                let dst = &mut out[(oy * out_w + ox) * c..][..c];
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let src = &d[(iy * w + ix) * c..][..c];
                        for (t, &s) in dst.iter_mut().zip(src) {
                            *t += s;
                        }
                    }
                }
                dst.iter_mut().for_each(|t| *t *= inv);
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![out_h, out_w, c], out),
            Op::AdaptiveAvgPool { x },
            rg,
        )
    }

    /// Mean over all spatial cells of an `[H, W, C]` map, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::shape(format!("global_avg_pool: expected HWC, got {s:?}"))),
        };
        let flat = self.reshape(x, &[h * w, c])?;
        self.mean_axis(flat, 0)
    }

    /// Samples an `[H, W, C]` grid at `[P, 2]` fractional `(row, col)` points.
    ///
    /// Coordinates outside the grid are clamped to the border. Differentiable
    /// in both the grid values and the point coordinates.
    pub fn bilinear_sample(&mut self, grid: Var, points: Var) -> Result<Var> {
        let (h, w, c) = match *self.shape(grid) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::shape(format!("bilinear_sample: grid must be HWC, got {s:?}"))),
        };
        let p = match *self.shape(points) {
            [p, 2] => p,
            ref s => {
                return Err(Error::shape(format!(
                    "bilinear_sample: points must be [P, 2], got {s:?}"
                )))
            }
        };
        let out = bilinear_forward(self.value(grid).data(), h, w, c, self.value(points).data(), p);
        let rg = self.rg(&[grid, points]);
        self.push(
            Tensor::from_parts(vec![p, c], out),
            Op::BilinearSample { grid, points },
            rg,
        )
    }

    // ---- indexing ----

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(Error::shape("gather_rows on a scalar"));
        }
        let n = v.shape()[0];
        if idx.is_empty() {
            return Err(Error::shape("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather_rows: index {bad} out of {n} rows")));
        }
        let inner = v.numel() / n;
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&v.data()[i * inner..][..inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// Embedding lookup: rows of `table` selected by token ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!("concat: {s:?} does not match {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..][..len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Records a user-defined operation with an explicit backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor<R>]) -> Result<Tensor<R>>,
        backward: CustomBackward<R>,
    ) -> Result<Var> {
        let vals: Vec<&Tensor<R>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&vals)?;
        let rg = self.rg(inputs);
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ---- backward ----

    /// Propagates gradients from a scalar `loss` into every leaf that requires
    /// them. Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<R>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf { .. } = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += *g),
                    None => node.grad = Some(gout),
                }
                continue;
            }
            for (input, g) in self.node_backward(i, &gout) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += *d),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// The parameter a leaf was bound from, if any.
    pub fn bound_param(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Leaf { param } => param,
            _ => None,
        }
    }

    /// Adds the gradients accumulated on bound parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<R>) {
        for (&id, &v) in &self.bound {
            if let Some(g) = &self.nodes[v.0].grad {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn node_backward(&self, i: usize, g: &[R]) -> Vec<(Var, Vec<R>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::Add(a, b) => {
                let mut res = vec![(*a, g.to_vec())];
                if want(*b) {
                    res.push((*b, reduce_bcast(g, self.value(*b).numel())));
                }
                res
            }
            Op::Sub(a, b) => {
                let mut res = vec![(*a, g.to_vec())];
                if want(*b) {
                    let neg: Vec<R> = g.iter().map(|&x| -x).collect();
                    res.push((*b, reduce_bcast(&neg, self.value(*b).numel())));
                }
                res
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                let mut res = Vec::new();
                if want(*a) {
                    res.push((*a, g.iter().enumerate().map(|(k, &d)| d * bv[k % nb]).collect()));
                }
                if want(*b) {
                    let full: Vec<R> = g.iter().zip(av).map(|(&d, &x)| d * x).collect();
                    res.push((*b, reduce_bcast(&full, nb)));
                }
                res
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                let mut res = Vec::new();
                if want(*a) {
                    res.push((*a, g.iter().enumerate().map(|(k, &d)| d / bv[k % nb]).collect()));
                }
                if want(*b) {
                    let full: Vec<R> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &d)| {
                            let y = bv[k % nb];
                            -d * av[k] / (y * y)
                        })
                        .collect();
                    res.push((*b, reduce_bcast(&full, nb)));
                }
                res
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&d| d * *c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let sa = self.shape(*a);
                let k = if ta { sa[0] } else { sa[1] };
                let mut res = Vec::new();
                if want(*a) {
                    // d op(A) = G · op(B)ᵀ  (m x k)
                    let mut da = vec![R::zero(); m * k];
                    if ta {
                        kernels::matmul_into_transposed(g, false, val(*b), !tb, m, n, k, &mut da);
                    } else {
                        kernels::matmul_into(g, false, val(*b), !tb, m, n, k, &mut da, false);
                    }
                    res.push((*a, da));
                }
                if want(*b) {
                    // d op(B) = op(A)ᵀ · G  (k x n)
                    let mut db = vec![R::zero(); k * n];
                    if tb {
                        kernels::matmul_into_transposed(val(*a), !ta, g, false, k, m, n, &mut db);
                    } else {
                        kernels::matmul_into(val(*a), !ta, g, false, k, m, n, &mut db, false);
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Bmm { a, b, tb } => {
                let tb = *tb;
                let [bs, m, n] = out.shape()[..] else { unreachable!() };
                let k = self.shape(*a)[2];
                let (av, bv) = (val(*a), val(*b));
                let mut res = Vec::new();
                if want(*a) {
                    let mut da = vec![R::zero(); bs * m * k];
                    for i in 0..bs {
                        kernels::matmul_into(
                            &g[i * m * n..][..m * n],
                            false,
                            &bv[i * k * n..][..k * n],
                            !tb,
                            m,
                            n,
                            k,
                            &mut da[i * m * k..][..m * k],
                            false,
                        );
                    }
                    res.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![R::zero(); bs * k * n];
                    for i in 0..bs {
                        let (ai, gi) = (&av[i * m * k..][..m * k], &g[i * m * n..][..m * n]);
                        let dbi = &mut db[i * k * n..][..k * n];
                        if tb {
                            // B stored [n, k]: dB = Gᵀ · A
                            kernels::matmul_into(gi, true, ai, false, n, m, k, dbi, false);
                        } else {
                            kernels::matmul_into(ai, true, gi, false, k, m, n, dbi, false);
                        }
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Transpose(x) => {
                let (c, r) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![R::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Relu(x) => vec![(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &e)| if e > R::zero() { d } else { R::zero() })
                    .collect(),
            )],
            Op::Sigmoid(x) => vec![(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&d, &s)| d * s * (R::one() - s))
                    .collect(),
            )],
            Op::Exp(x) => vec![(*x, g.iter().zip(out.data()).map(|(&d, &y)| d * y).collect())],
            Op::Ln(x) => vec![(*x, g.iter().zip(val(*x)).map(|(&d, &e)| d / e).collect())],
            Op::Clamp { x, lo, hi } => vec![(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &e)| if e < *lo || e > *hi { R::zero() } else { d })
                    .collect(),
            )],
            Op::Softmax { x, axis, inv_temp } => {
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                let s = out.data();
                let mut dx = vec![R::zero(); s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: R = (0..len).map(|a| g[base + a * inner] * s[base + a * inner]).sum();
                        for a in 0..len {
                            let k = base + a * inner;
                            dx[k] = s[k] * (g[k] - dot) * *inv_temp;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(self.shape(*x), *axis);
                let mut dx = vec![R::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        dx[(o * len + a) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma);
                let d = gm.len();
                let rows = xhat.len() / d;
                let inv_d = R::lit(1.0 / d as f64);
                let mut dx = vec![R::zero(); xhat.len()];
                let mut dg = vec![R::zero(); d];
                let mut db = vec![R::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..][..d];
                    let xr = &xhat[r * d..][..d];
                    let mut mean_dxh = R::zero();
                    let mut mean_dxh_xh = R::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                        dg[j] += gr[j] * xr[j];
                        db[j] += gr[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.oh * geom.ow;
                let plen = geom.patch_len();
                let cout = out.shape()[2];
                let mut res = Vec::new();
                if want(*w) {
                    let mut dw = vec![R::zero(); plen * cout];
                    kernels::matmul_into(cols, true, g, false, plen, rows, cout, &mut dw, false);
                    res.push((*w, dw));
                }
                if let Some(b) = b {
                    if want(*b) {
                        let mut db = vec![R::zero(); cout];
                        for r in 0..rows {
                            for (t, &d) in db.iter_mut().zip(&g[r * cout..][..cout]) {
                                *t += d;
                            }
                        }
                        res.push((*b, db));
                    }
                }
                if want(*x) {
                    let mut dcols = vec![R::zero(); rows * plen];
                    kernels::matmul_into(g, false, val(*w), true, rows, cout, plen, &mut dcols, false);
                    let mut dx = vec![R::zero(); geom.h * geom.w * geom.cin];
                    kernels::col2im(&dcols, geom, &mut dx);
                    res.push((*x, dx));
                }
                res
            }
            Op::AdaptiveAvgPool { x } => {
                let [h, w, c] = self.shape(*x)[..] else { unreachable!() };
                let (oh, ow) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![R::zero(); h * w * c];
                for oy in 0..oh {
                    let (y0, y1) = kernels::adaptive_bounds(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = kernels::adaptive_bounds(ox, w, ow);
                        let inv = R::lit(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                        let src = &g[(oy * ow + ox) * c..][..c];
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let dst = &mut dx[(iy * w + ix) * c..][..c];
                                for (t, &s) in dst.iter_mut().zip(src) {
                                    *t += s * inv;
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let inner = xv.numel() / xv.shape()[0];
                let mut dx = vec![R::zero(); xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (t, &s) in dx[i * inner..][..inner].iter_mut().zip(&g[r * inner..][..inner]) {
                        *t += s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut res = Vec::new();
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if want(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * total + offset..][..len]);
                        }
                        res.push((v, dv));
                    }
                    offset += len;
                }
                res
            }
            Op::BilinearSample { grid, points } => {
                let [h, w, c] = self.shape(*grid)[..] else {
                    unreachable!()
                };
                let (dgrid, dpts) = bilinear_backward(val(*grid), h, w, c, val(*points), g);
                vec![(*grid, dgrid), (*points, dpts)]
            }
            Op::L2Normalize { x, norms } => {
                let y = out.data();
                let d = y.len() / norms.len();
                let mut dx = vec![R::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..][..d];
                    let gr = &g[r * d..][..d];
                    let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / R::lit(n as f64);
                let mut dx: Vec<R> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * c + t] -= scale;
                }
                vec![(*logits, dx)]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<R>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(&vals, out, g);
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// Sums a full-size gradient down to a right operand of `n` elements that was
/// repeated along the leading axis.
fn reduce_bcast<R: Real>(g: &[R], n: usize) -> Vec<R> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![R::zero(); n];
    for (k, &d) in g.iter().enumerate() {
        out[k % n] += d;
    }
    out
}

pub(crate) fn bilinear_forward<R: Real>(grid: &[R], h: usize, w: usize, c: usize, pts: &[R], p: usize) -> Vec<R> {
    let mut out = vec![R::zero(); p * c];
    for i in 0..p {
        let ty = kernels::tap(pts[2 * i], h);
        let tx = kernels::tap(pts[2 * i + 1], w);
        let (wy1, wx1) = (ty.frac, tx.frac);
        let (wy0, wx0) = (R::one() - wy1, R::one() - wx1);
        let (w00, w01, w10, w11) = (wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1);
        let g00 = &grid[(ty.lo * w + tx.lo) * c..][..c];
        let g01 = &grid[(ty.lo * w + tx.hi) * c..][..c];
        let g10 = &grid[(ty.hi * w + tx.lo) * c..][..c];
        let g11 = &grid[(ty.hi * w + tx.hi) * c..][..c];
        let o = &mut out[i * c..][..c];
        for k in 0..c {
            o[k] = g00[k] * w00 + g01[k] * w01 + g10[k] * w10 + g11[k] * w11;
        }
    }
    out
}

fn bilinear_backward<R: Real>(grid: &[R], h: usize, w: usize, c: usize, pts: &[R], g: &[R]) -> (Vec<R>, Vec<R>) {
    let p = pts.len() / 2;
    let mut dgrid = vec![R::zero(); grid.len()];
    let mut dpts = vec![R::zero(); pts.len()];
    for i in 0..p {
        let ty = kernels::tap(pts[2 * i], h);
        let tx = kernels::tap(pts[2 * i + 1], w);
        let (wy1, wx1) = (ty.frac, tx.frac);
        let (wy0, wx0) = (R::one() - wy1, R::one() - wx1);
        let idx = [
            (ty.lo * w + tx.lo) * c,
            (ty.lo * w + tx.hi) * c,
            (ty.hi * w + tx.lo) * c,
            (ty.hi * w + tx.hi) * c,
        ];
        let wts = [wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1];
        let gi = &g[i * c..][..c];
        let (mut dy, mut dx) = (R::zero(), R::zero());
        for k in 0..c {
            let (g00, g01, g10, g11) = (grid[idx[0] + k], grid[idx[1] + k], grid[idx[2] + k], grid[idx[3] + k]);
            for (slot, wt) in idx.iter().zip(wts) {
                dgrid[slot + k] += gi[k] * wt;
            }
            dy += gi[k] * (wx0 * (g10 - g00) + wx1 * (g11 - g01));
            dx += gi[k] * (wy0 * (g01 - g00) + wy1 * (g11 - g10));
        }
        if ty.interior && ty.lo != ty.hi {
            dpts[2 * i] = dy;
        }
        if tx.interior && tx.lo != tx.hi {
            dpts[2 * i + 1] = dx;
        }
    }
    (dgrid, dpts)
}
