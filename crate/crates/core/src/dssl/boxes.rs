use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{bilinear_forward, named_rng, Real, Tensor};

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PatchBox {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: w,
            y1: h,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.x1 <= self.x0 || self.y1 <= self.y0 || self.x1 > w || self.y1 > h {
            return Err(Error::contract(format!(
                "box {self:?} is empty or outside a {h}x{w} image"
            )));
        }
        Ok(())
    }
}

/// `n` boxes with independent width and height drawn uniformly from
/// `[min_frac, max_frac] * min(h, w)` and uniform positions.
pub fn sample_patch_boxes(
    h: usize,
    w: usize,
    n: usize,
    min_frac: f64,
    max_frac: f64,
    seed: u64,
) -> Result<Vec<PatchBox>> {
    if n == 0 {
        return Err(Error::Param("need at least one patch box".into()));
    }
    if !(0.0 < min_frac && min_frac <= max_frac && max_frac <= 1.0) {
        return Err(Error::Param(format!(
            "box size fractions [{min_frac}, {max_frac}] are invalid"
        )));
    }
    let m = h.min(w) as f64;
    let lo = ((min_frac * m).ceil() as usize).max(1);
    let hi = ((max_frac * m).floor() as usize).max(lo).min(h.min(w));
    let mut rng = named_rng(seed, "dssl.boxes");
    Ok((0..n)
        .map(|_| {
            let bw = rng.gen_range(lo..=hi);
            let bh = rng.gen_range(lo..=hi);
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            PatchBox {
                x0,
                y0,
                x1: x0 + bw,
                y1: y0 + bh,
            }
        })
        .collect())
}

/// Crops `box` out of an `[H, W, C]` image and bilinearly resizes it to
/// `out x out` (pixel-centre alignment, border clamping).
pub fn crop_resize<R: Real>(image: &Tensor<R>, b: &PatchBox, out: usize) -> Result<Tensor<R>> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::shape(format!("crop_resize: expected [H, W, C], got {s:?}"))),
    };
    b.validate(h, w)?;
    if out == 0 {
        return Err(Error::shape("crop_resize: zero output size"));
    }
    let sy = b.height() as f64 / out as f64;
    let sx = b.width() as f64 / out as f64;
    let mut pts = Vec::with_capacity(out * out * 2);
    for oy in 0..out {
        for ox in 0..out {
            pts.push(R::lit(b.y0 as f64 + (oy as f64 + 0.5) * sy - 0.5));
            pts.push(R::lit(b.x0 as f64 + (ox as f64 + 0.5) * sx - 0.5));
        }
    }
    let data = bilinear_forward(image.data(), h, w, c, &pts, out * out);
    Tensor::new(&[out, out, c], data)
}
