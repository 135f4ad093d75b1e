//! Counting, density-map, and localization metrics.
//!
//! Counting errors compare scalar counts per image: C-MAE is the mean
//! absolute error, C-MSE the root mean squared error, and C-NAE the mean
//! absolute error normalized by each ground-truth count. Density metrics
//! compare maps pixelwise and include the histogram intersection of the two
//! mass-normalized maps. Localization extracts local peaks from a map,
//! matches them one-to-one against ground-truth points greedily by distance,
//! and sweeps the match threshold over 1..=100 pixels to build a
//! precision/recall curve summarized by its area (L-AUC).

use thiserror::Error;

use crate::annotations::Point;
use crate::density::DensityMap;

/// Localization thresholds, in pixels.
pub const PR_THRESHOLDS: std::ops::RangeInclusive<u32> = 1..=100;

/// Default peak threshold as a fraction of the map maximum.
pub const PEAK_THRESHOLD_FRACTION: f64 = 0.25;

/// Default peak suppression radius, in pixels.
pub const PEAK_RADIUS: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("got {preds} predictions but {gts} ground truths")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("ground-truth count at index {index} is {value}; normalized error needs positive counts")]
    NonPositiveGt { index: usize, value: f64 },
    #[error("maps differ in size: {a_w}x{a_h} vs {b_w}x{b_h}")]
    SizeMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("histogram intersection needs positive mass in both maps")]
    ZeroMassMap,
    #[error("localization metrics need at least one ground-truth point")]
    NoGtPoints,
}

/// Scalar counting errors over a set of images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountMetrics {
    pub c_mae: f64,
    /// Root mean squared error.
    pub c_mse: f64,
    /// Mean of `|pred - gt| / gt`.
    pub c_nae: f64,
}

/// Counting errors between per-image predictions and ground truths.
pub fn counting_metrics(preds: &[f64], gts: &[f64]) -> Result<CountMetrics, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput("count lists"));
    }
    let n = preds.len() as f64;
    let mut abs = 0.0f64;
    let mut sq = 0.0f64;
    let mut nae = 0.0f64;
    for (index, (&p, &g)) in preds.iter().zip(gts).enumerate() {
        if g <= 0.0 {
            return Err(EvalError::NonPositiveGt { index, value: g });
        }
        let d = (p - g).abs();
        abs += d;
        sq += d * d;
        nae += d / g;
    }
    Ok(CountMetrics {
        c_mae: abs / n,
        c_mse: (sq / n).sqrt(),
        c_nae: nae / n,
    })
}

/// Pixelwise density-map errors plus histogram intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMetrics {
    pub dm_mae: f64,
    /// Root mean squared pixel error.
    pub dm_mse: f64,
    /// Histogram intersection of the mass-normalized maps, in [0, 1].
    pub dm_hi: f64,
}

/// Compare a predicted density map against ground truth. Negative pixels are
/// clamped to zero for the histogram intersection only.
pub fn density_metrics(pred: &DensityMap, gt: &DensityMap) -> Result<DensityMetrics, EvalError> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(EvalError::SizeMismatch {
            a_w: pred.width(),
            a_h: pred.height(),
            b_w: gt.width(),
            b_h: gt.height(),
        });
    }
    let n = pred.values().len() as f64;
    let mut abs = 0.0f64;
    let mut sq = 0.0f64;
    for (p, g) in pred.values().iter().zip(gt.values()) {
        let d = (p - g).abs();
        abs += d;
        sq += d * d;
    }
    let pred_mass = pred.clamped_sum();
    let gt_mass = gt.clamped_sum();
    if pred_mass <= 0.0 || gt_mass <= 0.0 {
        return Err(EvalError::ZeroMassMap);
    }
    let mut hi = 0.0f64;
    for (p, g) in pred.values().iter().zip(gt.values()) {
        hi += (p.max(0.0) / pred_mass).min(g.max(0.0) / gt_mass);
    }
    Ok(DensityMetrics {
        dm_mae: abs / n,
        dm_mse: (sq / n).sqrt(),
        dm_hi: hi,
    })
}

/// A local maximum of a density map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Local maxima at or above `value_threshold`: pixels strictly greater than
/// every other value within `radius` (Euclidean). Equal-valued pixels within
/// one radius resolve by row-major order; the first occurrence survives and
/// suppresses later equals in its radius. Peaks return sorted by descending
/// value (row-major among equals).
pub fn find_peaks(map: &DensityMap, value_threshold: f64, radius: usize) -> Vec<Peak> {
    let w = map.width();
    let h = map.height();
    let r = radius as i64;
    let r2 = r * r;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx != 0 || dy != 0) && dx * dx + dy * dy <= r2 {
                offsets.push((dx, dy));
            }
        }
    }

    let mut candidates: Vec<Peak> = Vec::new();
    for y in 0..h {
        'pixels: for x in 0..w {
            let v = map.get(x, y);
            if v < value_threshold {
                continue;
            }
            for &(dx, dy) in &offsets {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                if map.get(nx as usize, ny as usize) > v {
                    continue 'pixels;
                }
            }
            candidates.push(Peak { x, y, value: v });
        }
    }

    candidates.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    let mut peaks: Vec<Peak> = Vec::new();
    for cand in candidates {
        let tied = peaks.iter().any(|p| {
            let dx = p.x as i64 - cand.x as i64;
            let dy = p.y as i64 - cand.y as i64;
            p.value == cand.value && dx * dx + dy * dy <= r2
        });
        if !tied {
            peaks.push(cand);
        }
    }
    peaks
}

/// Default peak threshold for a map: a fixed fraction of its maximum.
pub fn default_peak_threshold(map: &DensityMap) -> f64 {
    PEAK_THRESHOLD_FRACTION * map.max_value()
}

/// One-to-one matching between predicted and ground-truth points.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Accepted matches as (prediction index, ground-truth index, distance),
    /// indices into the caller's input order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Greedy one-to-one matching: candidate pairs within `threshold` are taken
/// in order of ascending distance and accepted when both endpoints are still
/// free. Points are put in canonical coordinate order before matching, so the
/// outcome does not depend on input permutation.
pub fn greedy_match(preds: &[Point], gts: &[Point], threshold: f64) -> MatchResult {
    let order = |pts: &[Point]| {
        let mut idx: Vec<usize> = (0..pts.len()).collect();
        idx.sort_by(|&a, &b| {
            pts[a]
                .x
                .total_cmp(&pts[b].x)
                .then(pts[a].y.total_cmp(&pts[b].y))
        });
        idx
    };
    let p_order = order(preds);
    let g_order = order(gts);

    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (cp, &pi) in p_order.iter().enumerate() {
        for (cg, &gi) in g_order.iter().enumerate() {
            let d = preds[pi].distance(&gts[gi]);
            if d <= threshold {
                cands.push((d, cp, cg));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut p_used = vec![false; preds.len()];
    let mut g_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (d, cp, cg) in cands {
        if !p_used[cp] && !g_used[cg] {
            p_used[cp] = true;
            g_used[cg] = true;
            pairs.push((p_order[cp], g_order[cg], d));
        }
    }
    let tp = pairs.len();
    MatchResult {
        pairs,
        true_positives: tp,
        false_positives: preds.len() - tp,
        false_negatives: gts.len() - tp,
    }
}

/// One precision/recall sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall swept over the localization thresholds, with the area
/// under the curve.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub l_auc: f64,
}

/// Distances of the pairs the greedy matcher accepts below `cap`, ascending.
/// Greedy acceptance processes pairs by ascending distance, so the matches at
/// any threshold `t <= cap` are exactly the accepted pairs with distance
/// `<= t`.
fn accepted_distances(preds: &[Point], gts: &[Point], cap: f64) -> Vec<f64> {
    let mut dists: Vec<f64> = greedy_match(preds, gts, cap)
        .pairs
        .into_iter()
        .map(|(_, _, d)| d)
        .collect();
    dists.sort_by(f64::total_cmp);
    dists
}

fn curve_from_pools(
    matched: &[f64],
    n_preds: usize,
    n_gts: usize,
) -> Result<PrCurve, EvalError> {
    if n_gts == 0 {
        return Err(EvalError::NoGtPoints);
    }
    let mut points = Vec::with_capacity(100);
    for t in PR_THRESHOLDS {
        let t = t as f64;
        let tp = matched.partition_point(|&d| d <= t);
        let precision = if n_preds == 0 {
            1.0
        } else {
            tp as f64 / n_preds as f64
        };
        let recall = tp as f64 / n_gts as f64;
        points.push(PrPoint {
            threshold: t,
            precision,
            recall,
        });
    }
    // trapezoid over recall, anchored at zero recall with the first
    // threshold's precision
    let mut l_auc = 0.0f64;
    let mut prev_r = 0.0f64;
    let mut prev_p = points[0].precision;
    for pt in &points {
        l_auc += (pt.recall - prev_r) * (pt.precision + prev_p) / 2.0;
        prev_r = pt.recall;
        prev_p = pt.precision;
    }
    Ok(PrCurve { points, l_auc })
}

/// Precision/recall curve of one image's predicted points.
pub fn pr_curve(preds: &[Point], gts: &[Point]) -> Result<PrCurve, EvalError> {
    let cap = *PR_THRESHOLDS.end() as f64;
    curve_from_pools(&accepted_distances(preds, gts, cap), preds.len(), gts.len())
}

/// Precision/recall curve pooled over many images: matching stays per-image,
/// true/false positives accumulate across the set.
pub fn pr_curve_pooled(sets: &[(Vec<Point>, Vec<Point>)]) -> Result<PrCurve, EvalError> {
    let cap = *PR_THRESHOLDS.end() as f64;
    let mut matched = Vec::new();
    let mut n_preds = 0usize;
    let mut n_gts = 0usize;
    for (preds, gts) in sets {
        matched.extend(accepted_distances(preds, gts, cap));
        n_preds += preds.len();
        n_gts += gts.len();
    }
    matched.sort_by(f64::total_cmp);
    curve_from_pools(&matched, n_preds, n_gts)
}

/// Count extrapolation from sparse per-region densities: the mean density
/// times the total area.
pub fn jacobs_extrapolate(densities: &[f64], total_area: f64) -> Result<f64, EvalError> {
    if densities.is_empty() {
        return Err(EvalError::EmptyInput("density samples"));
    }
    Ok(densities.iter().sum::<f64>() / densities.len() as f64 * total_area)
}
