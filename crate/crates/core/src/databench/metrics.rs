use crate::error::{Error, Result};

/// Mean of the top 1% (at least one) of the values.
pub fn image_score(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let k = ((probs.len() as f64) * 0.01).ceil().max(1.0) as usize;
    let mut v = probs.to_vec();
    let idx = v.len() - k;
    v.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    v[idx..].iter().sum::<f64>() / k as f64
}

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite score".into()));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(s+ > s-) + P(s+ == s-) / 2`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count, for each positive, the negatives strictly below it plus half the
    // tied ones. Integer arithmetic keeps the sum exact.
    let mut below: u128 = 0;
    let mut ties: u128 = 0;
    let mut negs_seen: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let p = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let n = (j - i) as u128 - p;
        below += p * negs_seen;
        ties += p * n;
        negs_seen += n;
        i = j;
    }
    Ok((2 * below + ties) as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Step-wise average precision over the descending-score sweep, tied scores
/// entering together.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs a positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let p = order[i..j].iter().filter(|&&k| labels[k]).count();
        tp += p;
        seen += j - i;
        if p > 0 {
            ap += p as f64 * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok((ap / pos as f64).min(1.0))
}

/// Connected components of a binary `h x w` mask under 8-connectivity.
/// Returns a label per pixel (`0` = background) and the component count.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; h * w];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n as u32;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = n as u32;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, n)
}

/// A score map with its binary ground truth, both `h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub scores: Vec<f64>,
    pub gt: Vec<bool>,
    pub h: usize,
    pub w: usize,
}

pub const AUPRO_FPR_LIMIT: f64 = 0.3;
pub const AUPRO_MAX_THRESHOLDS: usize = 500;

/// Area under the per-region-overlap curve up to `fpr_limit`, normalised by
/// the limit.
///
/// At threshold `t` a pixel is predicted when its score exceeds `t`; the
/// thresholds are the distinct scores (at most `max_thresholds` of them, taken
/// at evenly spaced ranks). The curve starts at the origin and is held flat
/// after its last point.
pub fn aupro(maps: &[ScoredMask], fpr_limit: f64, max_thresholds: Option<usize>) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Param(format!("FPR limit must be in (0, 1], got {fpr_limit}")));
    }
    let mut regions: Vec<Vec<f64>> = Vec::new();
    let mut negatives = Vec::new();
    let mut all = Vec::new();
    for m in maps {
        if m.scores.len() != m.h * m.w || m.gt.len() != m.h * m.w {
            return Err(Error::shape("score map and mask must both be h x w"));
        }
        if m.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::UndefinedMetric("non-finite score".into()));
        }
        let (lab, n) = connected_components(&m.gt, m.h, m.w);
        let first = regions.len();
        regions.extend((0..n).map(|_| Vec::new()));
        for (i, &s) in m.scores.iter().enumerate() {
            if lab[i] == 0 {
                negatives.push(s);
            } else {
                regions[first + lab[i] as usize - 1].push(s);
            }
        }
        all.extend_from_slice(&m.scores);
    }
    if regions.is_empty() {
        return Err(Error::UndefinedMetric(
            "AUPRO needs at least one ground-truth region".into(),
        ));
    }
    for r in &mut regions {
        r.sort_unstable_by(f64::total_cmp);
    }
    negatives.sort_unstable_by(f64::total_cmp);
    all.sort_unstable_by(f64::total_cmp);
    all.dedup();
    let thresholds: Vec<f64> = match max_thresholds {
        Some(k) if all.len() > k && k >= 2 => (0..k).map(|i| all[(i * (all.len() - 1)) / (k - 1)]).collect(),
        _ => all,
    };
    let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v <= t);
    let mut curve: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for &t in thresholds.iter().rev() {
        let fpr = if negatives.is_empty() {
            0.0
        } else {
            above(&negatives, t) as f64 / negatives.len() as f64
        };
        let pro = regions.iter().map(|r| above(r, t) as f64 / r.len() as f64).sum::<f64>() / regions.len() as f64;
        curve.push((fpr, pro));
    }
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= fpr_limit {
            break;
        }
        if x1 > fpr_limit {
            let y = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
            area += (fpr_limit - x0) * (y0 + y) / 2.0;
            return Ok(area / fpr_limit);
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    let (xl, yl) = *curve.last().unwrap();
    if xl < fpr_limit {
        area += (fpr_limit - xl) * yl;
    }
    Ok(area / fpr_limit)
}
