//! Central finite-difference verification of analytical gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check a random subset of coordinates per tensor instead of all.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose one-sided differences disagree by more than
    /// `tol` (relative), which happens when `x +/- eps` straddles a kink such
    /// as a ReLU at zero. Central differences are meaningless there.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_coords_per_tensor: None,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `tensor[index]` where the largest error occurred.
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates left out by `skip_kinks`.
    pub skipped: usize,
    pub passed: bool,
}

/// Checks the gradients of `f` with respect to every input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_params(&ParamStore::new(), inputs, |g, _, xs| f(g, xs), opts)
}

/// Checks the gradients of `f` with respect to its inputs and every parameter
/// of `store` that requires a gradient.
pub fn grad_check_with_params<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    grad_check_split(store, inputs, &f, &f, opts)
}

/// Like [`grad_check_with_params`], but the finite differences are taken of
/// `reference` while the analytical gradient comes from `f`.
///
/// Finite differences see through `detach`, so a loss with a stop-gradient
/// branch needs a reference that evaluates the same value with that branch
/// frozen at its unperturbed result. Both must agree at the base point.
pub fn grad_check_split<F, G>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    reference: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
    G: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let xs = inputs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = reference(&mut g, store, &xs)?;
        scalar_of(&g, loss)
    };

    let base = eval(store, inputs)?;
    if eval(store, inputs)?.to_bits() != base.to_bits() {
        return Err(Error::contract(
            "grad_check: function is not deterministic (fix its random seed)",
        ));
    }

    // analytical
    let mut g = Graph::new();
    let xs = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, store, &xs)?;
    let value = scalar_of(&g, loss)?;
    if (value - base).abs() > 1e-12 * base.abs().max(1.0) {
        return Err(Error::contract(format!(
            "grad_check: reference value {base} differs from the checked function {value}"
        )));
    }
    g.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    g.accumulate_param_grads(&mut with_grads);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pick = |n: usize| -> Vec<usize> {
        match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    let mut record = |name: String, analytic: f64, numeric: Option<f64>| {
        let Some(numeric) = numeric else {
            report.skipped += 1;
            return;
        };
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst = Some(name);
        }
    };

    let mut work = inputs.to_vec();
    for (t, &x) in xs.iter().enumerate() {
        let analytic = g
            .grad(x)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[t].numel()]);
        for j in pick(inputs[t].numel()) {
            let orig = work[t].data()[j];
            let numeric = central_difference(base, opts, |d| {
                work[t].data_mut()[j] = orig + d;
                let v = eval(store, &work);
                work[t].data_mut()[j] = orig;
                v
            })?;
            record(format!("input{t}[{j}]"), analytic[j], numeric);
        }
    }

    let mut pstore = store.clone();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.requires_grad())
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let analytic = with_grads.grad(id).to_vec();
        let name = store.param(id).name().to_string();
        for j in pick(analytic.len()) {
            let orig = store.value(id).data()[j];
            let numeric = central_difference(base, opts, |d| {
                pstore.value_mut(id).data_mut()[j] = orig + d;
                let v = eval(&pstore, inputs);
                pstore.value_mut(id).data_mut()[j] = orig;
                v
            })?;
            record(format!("{name}[{j}]"), analytic[j], numeric);
        }
    }

    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}

/// Central difference of `f` around 0 with step `opts.eps`, or `None` when
/// `skip_kinks` is set and the step straddles a kink.
///
/// The one-sided slopes of a smooth function differ by `f'' * eps`, which
/// shrinks tenfold with a tenfold smaller step. A kink within the step keeps
/// the gap from shrinking that way.
fn central_difference(
    base: f64,
    opts: &GradCheckOptions,
    mut f: impl FnMut(f64) -> Result<f64>,
) -> Result<Option<f64>> {
    let (fp, fm) = (f(opts.eps)?, f(-opts.eps)?);
    let numeric = (fp - fm) / (2.0 * opts.eps);
    if !opts.skip_kinks {
        return Ok(Some(numeric));
    }
    let scale = numeric.abs().max(opts.floor);
    let gap = (fp - 2.0 * base + fm).abs() / opts.eps;
    if gap <= opts.tol * scale {
        return Ok(Some(numeric));
    }
    let h = opts.eps / 10.0;
    let gap_small = (f(h)? - 2.0 * base + f(-h)?).abs() / h;
    // Smooth: gap_small ~ gap / 10. Allow slack for rounding in the small step.
    if (gap_small * 10.0 - gap).abs() <= 0.2 * gap {
        Ok(Some(numeric))
    } else {
        Ok(None)
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
