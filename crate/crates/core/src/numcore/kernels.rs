//! Raw compute kernels shared by the graph's forward and backward passes.

use super::Real;

/// Row-major matrix multiply `c (+)= op(a) * op(b)`.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<R: Real>(
    a: &[R],
    ta: bool,
    b: &[R],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [R],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    R::gemm(m, k, n, R::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Like [`matmul_into`] but writes the `m x n` result transposed (`n x m`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into_transposed<R: Real>(
    a: &[R],
    ta: bool,
    b: &[R],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [R],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    R::gemm(m, k, n, R::one(), a, rsa, csa, b, rsb, csb, R::one(), c, 1, m as isize);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unfolds an HWC image into `(oh*ow) x (kh*kw*cin)` patch rows, zero padded.
pub(crate) fn im2col<R: Real>(x: &[R], g: &ConvGeom) -> Vec<R> {
    let plen = g.patch_len();
    let mut cols = vec![R::zero(); g.oh * g.ow * plen];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch-row gradients back into the image.
pub(crate) fn col2im<R: Real>(cols: &[R], g: &ConvGeom, dx: &mut [R]) {
    let plen = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// `[start, end)` of output cell `i` when pooling `len` inputs into `out` cells.
pub(crate) fn adaptive_bounds(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Bilinear tap of a clamped fractional coordinate along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<R> {
    pub lo: usize,
    pub hi: usize,
    pub frac: R,
    /// Whether the coordinate was inside the grid (zero gradient when clamped).
    pub interior: bool,
}

pub(crate) fn tap<R: Real>(coord: R, len: usize) -> Tap<R> {
    let max = R::lit((len - 1) as f64);
    let interior = coord >= R::zero() && coord <= max;
    let c = coord.max(R::zero()).min(max);
    let lo = c.floor();
    let lo_i = lo.to_usize().unwrap_or(0).min(len - 1);
    let hi_i = (lo_i + 1).min(len - 1);
    Tap {
        lo: lo_i,
        hi: hi_i,
        frac: c - lo,
        interior,
    }
}

/// Numerically stable softmax along a strided axis, in place.
///
/// The tensor is viewed as `outer x len x inner`.
pub(crate) fn softmax_strided<R: Real>(x: &mut [R], outer: usize, len: usize, inner: usize, inv_temp: R) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = R::neg_infinity();
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = R::zero();
            for a in 0..len {
                let e = ((x[base + a * inner] - max) * inv_temp).exp();
                x[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                x[base + a * inner] /= sum;
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
