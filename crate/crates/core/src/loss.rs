//! Decomposable training loss over multi-level density predictions.
//!
//! The total loss is the weight-normalized mean of one MSE term per density
//! level plus a squared-error term on the scalar count:
//!
//! `total = (sum_j w_j * loss_j) / (sum_j w_j)`
//!
//! Every term is differentiable in the prediction, and the analytic gradients
//! exposed here back the model's reverse-mode pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityError, DensityMap, DensityStack, Level};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("maps differ in size: {a_w}x{a_h} vs {b_w}x{b_h}")]
    SizeMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("maps differ in level: {a} vs {b}")]
    LevelMismatch { a: Level, b: Level },
    #[error("stack levels {got:?} do not match configured levels {expected:?}")]
    StackLevels { expected: Vec<Level>, got: Vec<Level> },
    #[error("loss config needs at least one level")]
    NoLevels,
    #[error("levels must be strictly increasing")]
    UnorderedLevels,
    #[error("expected {expected} level weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weights must be finite and nonnegative")]
    BadWeight,
    #[error("at least one weight must be positive")]
    AllWeightsZero,
    #[error("count fusion '{mode}' needs at least one map sum")]
    NoMapSums { mode: &'static str },
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// How the scalar count prediction is formed from the regression head and the
/// predicted maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// The regression head alone produces the count.
    RegressionOnly,
    /// Arithmetic mean of the regression count and every map sum.
    MeanOfCounts,
    /// The model folds map sums into the count head; its output is already
    /// fused.
    ConcatFeature,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::RegressionOnly => "regression_only",
            FusionMode::MeanOfCounts => "mean_of_counts",
            FusionMode::ConcatFeature => "concat_feature",
        }
    }
}

/// Loss term layout: which levels participate, the weight of each level term,
/// the weight of the count term, and the count fusion mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossConfigRepr", into = "LossConfigRepr")]
pub struct LossConfig {
    pub levels: Vec<Level>,
    pub level_weights: Vec<f64>,
    pub count_weight: f64,
    pub fusion_mode: FusionMode,
}

/// Serialized form: `weights` carries one entry per level plus a trailing
/// entry for the count term.
#[derive(Serialize, Deserialize)]
struct LossConfigRepr {
    levels: Vec<Level>,
    weights: Vec<f64>,
    fusion_mode: FusionMode,
}

impl TryFrom<LossConfigRepr> for LossConfig {
    type Error = String;

    fn try_from(repr: LossConfigRepr) -> Result<Self, String> {
        if repr.weights.len() != repr.levels.len() + 1 {
            return Err(format!(
                "expected {} weights (one per level plus count), got {}",
                repr.levels.len() + 1,
                repr.weights.len()
            ));
        }
        let mut weights = repr.weights;
        let count_weight = weights.pop().expect("nonempty");
        let cfg = LossConfig {
            levels: repr.levels,
            level_weights: weights,
            count_weight,
            fusion_mode: repr.fusion_mode,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

impl From<LossConfig> for LossConfigRepr {
    fn from(cfg: LossConfig) -> Self {
        let mut weights = cfg.level_weights;
        weights.push(cfg.count_weight);
        LossConfigRepr {
            levels: cfg.levels,
            weights,
            fusion_mode: cfg.fusion_mode,
        }
    }
}

impl LossConfig {
    /// Equal unit weights over the given levels and the count term.
    pub fn equal_weights(levels: Vec<Level>, fusion_mode: FusionMode) -> Self {
        let n = levels.len();
        Self {
            levels,
            level_weights: vec![1.0; n],
            count_weight: 1.0,
            fusion_mode,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.levels.is_empty() {
            return Err(LossError::NoLevels);
        }
        for pair in self.levels.windows(2) {
            if pair[0].partial_cmp(&pair[1]) != Some(std::cmp::Ordering::Less) {
                return Err(LossError::UnorderedLevels);
            }
        }
        if self.level_weights.len() != self.levels.len() {
            return Err(LossError::WeightCount {
                expected: self.levels.len(),
                got: self.level_weights.len(),
            });
        }
        let all = self.level_weights.iter().chain(std::iter::once(&self.count_weight));
        let mut any_positive = false;
        for &w in all {
            if !w.is_finite() || w < 0.0 {
                return Err(LossError::BadWeight);
            }
            any_positive |= w > 0.0;
        }
        if !any_positive {
            return Err(LossError::AllWeightsZero);
        }
        Ok(())
    }

    fn weight_total(&self) -> f64 {
        self.level_weights.iter().sum::<f64>() + self.count_weight
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::equal_weights(
            vec![Level::Finite(1.0), Level::Finite(2.0), Level::Inf],
            FusionMode::RegressionOnly,
        )
    }
}

/// Every term of one composition loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub per_level: Vec<(Level, f64)>,
    pub count_term: f64,
    pub total: f64,
}

/// Mean squared error between two maps of the same level and size.
pub fn level_loss(pred: &DensityMap, target: &DensityMap) -> Result<f64, LossError> {
    check_same_shape(pred, target)?;
    let n = pred.values().len() as f64;
    let mut acc = 0.0f64;
    for (p, t) in pred.values().iter().zip(target.values()) {
        let d = p - t;
        acc += d * d;
    }
    Ok(acc / n)
}

fn check_same_shape(pred: &DensityMap, target: &DensityMap) -> Result<(), LossError> {
    if pred.width() != target.width() || pred.height() != target.height() {
        return Err(LossError::SizeMismatch {
            a_w: pred.width(),
            a_h: pred.height(),
            b_w: target.width(),
            b_h: target.height(),
        });
    }
    if pred.level() != target.level() {
        return Err(LossError::LevelMismatch {
            a: pred.level(),
            b: target.level(),
        });
    }
    Ok(())
}

/// Squared error between predicted and true count.
pub fn count_loss(pred_count: f64, gt_count: f64) -> f64 {
    let d = pred_count - gt_count;
    d * d
}

/// Weight-normalized mean of the per-level MSE terms and the count term.
pub fn composition_loss(
    pred: &DensityStack,
    target: &DensityStack,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    cfg.validate()?;
    check_stack(pred, cfg)?;
    check_stack(target, cfg)?;
    let mut per_level = Vec::with_capacity(cfg.levels.len());
    let mut weighted = 0.0f64;
    for ((pm, tm), &w) in pred
        .maps()
        .iter()
        .zip(target.maps())
        .zip(&cfg.level_weights)
    {
        let term = level_loss(pm, tm)?;
        weighted += w * term;
        per_level.push((pm.level(), term));
    }
    let count_term = count_loss(pred.count(), target.count());
    weighted += cfg.count_weight * count_term;
    Ok(LossReport {
        per_level,
        count_term,
        total: weighted / cfg.weight_total(),
    })
}

fn check_stack(stack: &DensityStack, cfg: &LossConfig) -> Result<(), LossError> {
    let got = stack.levels();
    if got != cfg.levels {
        return Err(LossError::StackLevels {
            expected: cfg.levels.clone(),
            got,
        });
    }
    Ok(())
}

/// Gradient of [`composition_loss`] with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossGrad {
    /// One row-major gradient buffer per level map.
    pub maps: Vec<Vec<f64>>,
    /// Gradient with respect to the predicted count.
    pub count: f64,
}

/// Composition loss plus its analytic gradient in the prediction.
pub fn composition_loss_grad(
    pred: &DensityStack,
    target: &DensityStack,
    cfg: &LossConfig,
) -> Result<(LossReport, LossGrad), LossError> {
    let report = composition_loss(pred, target, cfg)?;
    let w_total = cfg.weight_total();
    let mut maps = Vec::with_capacity(pred.maps().len());
    for ((pm, tm), &w) in pred
        .maps()
        .iter()
        .zip(target.maps())
        .zip(&cfg.level_weights)
    {
        let n = pm.values().len() as f64;
        let scale = 2.0 * w / (n * w_total);
        maps.push(
            pm.values()
                .iter()
                .zip(tm.values())
                .map(|(p, t)| scale * (p - t))
                .collect(),
        );
    }
    let count = 2.0 * cfg.count_weight * (pred.count() - target.count()) / w_total;
    Ok((report, LossGrad { maps, count }))
}

/// Combine the regression count with per-level map sums.
///
/// Callers pass map sums with negative pixels clamped to zero (see
/// [`DensityMap::clamped_sum`]). In `concat_feature` mode fusion is learned
/// inside the model, so this is the identity on the regression output.
pub fn fuse_counts(
    mode: FusionMode,
    regression_count: f64,
    map_sums: &[f64],
) -> Result<f64, LossError> {
    match mode {
        FusionMode::RegressionOnly => Ok(regression_count),
        FusionMode::MeanOfCounts => {
            if map_sums.is_empty() {
                return Err(LossError::NoMapSums {
                    mode: mode.as_str(),
                });
            }
            let total: f64 = regression_count + map_sums.iter().sum::<f64>();
            Ok(total / (map_sums.len() + 1) as f64)
        }
        FusionMode::ConcatFeature => {
            if map_sums.is_empty() {
                return Err(LossError::NoMapSums {
                    mode: mode.as_str(),
                });
            }
            Ok(regression_count)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::DensityMap;

    fn map(level: Level, w: usize, h: usize, values: Vec<f64>) -> DensityMap {
        DensityMap::from_values(w, h, level, values).unwrap()
    }

    fn stack(values: &[Vec<f64>], count: f64) -> DensityStack {
        let levels = [Level::Finite(1.0), Level::Finite(2.0), Level::Inf];
        let maps = values
            .iter()
            .zip(levels)
            .map(|(v, l)| map(l, 2, 2, v.clone()))
            .collect();
        DensityStack::new(maps, count).unwrap()
    }

    #[test]
    fn level_loss_is_mean_squared_difference() {
        let a = map(Level::Finite(1.0), 2, 1, vec![0.0, 1.0]);
        let b = map(Level::Finite(1.0), 2, 1, vec![1.0, 1.0]);
        assert_eq!(level_loss(&a, &b).unwrap(), 0.5);
        assert_eq!(level_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn level_loss_rejects_mismatched_maps() {
        let a = map(Level::Finite(1.0), 2, 1, vec![0.0, 1.0]);
        let b = map(Level::Finite(1.0), 1, 2, vec![1.0, 1.0]);
        assert!(matches!(level_loss(&a, &b), Err(LossError::SizeMismatch { .. })));
        let c = map(Level::Finite(2.0), 2, 1, vec![1.0, 1.0]);
        assert!(matches!(level_loss(&a, &c), Err(LossError::LevelMismatch { .. })));
    }

    #[test]
    fn total_is_weight_normalized_mean() {
        // terms: level losses {3, 0, 0}, count loss 999, weights {2, 1, 1, 0}
        let pred = stack(
            &[
                vec![3.0f64.sqrt(), -(3.0f64.sqrt()), 3.0f64.sqrt(), -(3.0f64.sqrt())],
                vec![0.0; 4],
                vec![0.0; 4],
            ],
            999.0f64.sqrt(),
        );
        let target = stack(&[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]], 0.0);
        let cfg = LossConfig {
            levels: vec![Level::Finite(1.0), Level::Finite(2.0), Level::Inf],
            level_weights: vec![2.0, 1.0, 1.0],
            count_weight: 0.0,
            fusion_mode: FusionMode::RegressionOnly,
        };
        let report = composition_loss(&pred, &target, &cfg).unwrap();
        assert!((report.per_level[0].1 - 3.0).abs() < 1e-12);
        assert!((report.total - 1.5).abs() < 1e-12);
        assert!((report.count_term - 999.0).abs() < 1e-9);
    }

    #[test]
    fn zero_prediction_on_zero_target_is_zero_loss() {
        let z = stack(&[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]], 0.0);
        let cfg = LossConfig::default();
        let report = composition_loss(&z, &z, &cfg).unwrap();
        assert_eq!(report.total, 0.0);
    }

    #[test]
    fn doubling_count_weight_doubles_its_share() {
        let pred = stack(&[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]], 3.0);
        let target = stack(&[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]], 1.0);
        let mut cfg = LossConfig::default();
        let base = composition_loss(&pred, &target, &cfg).unwrap();
        cfg.count_weight = 2.0;
        let doubled = composition_loss(&pred, &target, &cfg).unwrap();
        // count term 4, level terms 0: base 4/4, doubled 8/5
        assert!((base.total - 1.0).abs() < 1e-12);
        assert!((doubled.total - 1.6).abs() < 1e-12);
    }

    #[test]
    fn config_weight_shape_is_enforced() {
        let cfg = LossConfig {
            levels: vec![Level::Finite(1.0), Level::Inf],
            level_weights: vec![1.0],
            count_weight: 1.0,
            fusion_mode: FusionMode::RegressionOnly,
        };
        assert!(matches!(cfg.validate(), Err(LossError::WeightCount { .. })));
        let zeros = LossConfig {
            levels: vec![Level::Finite(1.0)],
            level_weights: vec![0.0],
            count_weight: 0.0,
            fusion_mode: FusionMode::RegressionOnly,
        };
        assert!(matches!(zeros.validate(), Err(LossError::AllWeightsZero)));
    }

    #[test]
    fn config_serde_uses_flat_weight_list() {
        let cfg = LossConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"weights\":[1.0,1.0,1.0,1.0]"), "{json}");
        let back: LossConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let bad = r#"{"levels":[1,2],"weights":[1.0],"fusion_mode":"regression_only"}"#;
        assert!(serde_json::from_str::<LossConfig>(bad).is_err());
    }

    #[test]
    fn fuse_mean_of_counts() {
        let fused = fuse_counts(FusionMode::MeanOfCounts, 100.0, &[110.0, 90.0, 100.0]).unwrap();
        assert_eq!(fused, 100.0);
        assert!(fuse_counts(FusionMode::MeanOfCounts, 1.0, &[]).is_err());
    }

    #[test]
    fn fuse_regression_ignores_sums() {
        assert_eq!(fuse_counts(FusionMode::RegressionOnly, 42.5, &[]).unwrap(), 42.5);
        let fused = fuse_counts(FusionMode::ConcatFeature, 17.0, &[1.0]).unwrap();
        assert_eq!(fused, 17.0);
        assert!(fuse_counts(FusionMode::ConcatFeature, 17.0, &[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let levels = [Level::Finite(1.0), Level::Finite(2.0), Level::Inf];
        let rand_stack = |rng: &mut rand_chacha::ChaCha8Rng| {
            let maps = levels
                .iter()
                .map(|&l| {
                    map(
                        l,
                        8,
                        8,
                        (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                })
                .collect();
            DensityStack::new(maps, rng.gen_range(0.0..10.0)).unwrap()
        };
        let cfg = LossConfig {
            levels: levels.to_vec(),
            level_weights: vec![0.7, 1.3, 2.0],
            count_weight: 0.5,
            fusion_mode: FusionMode::RegressionOnly,
        };
        for _ in 0..5 {
            let pred = rand_stack(&mut rng);
            let target = rand_stack(&mut rng);
            let (_, grad) = composition_loss_grad(&pred, &target, &cfg).unwrap();
            let h = 1e-3;
            // probe a handful of entries per map plus the count
            for (mi, gmap) in grad.maps.iter().enumerate() {
                for &pi in &[0usize, 13, 37, 63] {
                    let mut plus = pred.clone();
                    let mut minus = pred.clone();
                    let bump = |s: &DensityStack, delta: f64| {
                        let maps = s
                            .maps()
                            .iter()
                            .enumerate()
                            .map(|(i, m)| {
                                let mut v = m.values().to_vec();
                                if i == mi {
                                    v[pi] += delta;
                                }
                                map(m.level(), 8, 8, v)
                            })
                            .collect();
                        DensityStack::new(maps, s.count()).unwrap()
                    };
                    plus = bump(&plus, h);
                    minus = bump(&minus, -h);
                    let lp = composition_loss(&plus, &target, &cfg).unwrap().total;
                    let lm = composition_loss(&minus, &target, &cfg).unwrap().total;
                    let fd = (lp - lm) / (2.0 * h);
                    let ga = gmap[pi];
                    let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-12);
                    assert!(rel < 1e-6, "map {mi} entry {pi}: analytic {ga} vs fd {fd}");
                }
            }
            let rebuild = |c: f64| {
                DensityStack::new(pred.maps().to_vec(), c).unwrap()
            };
            let lp = composition_loss(&rebuild(pred.count() + h), &target, &cfg)
                .unwrap()
                .total;
            let lm = composition_loss(&rebuild(pred.count() - h), &target, &cfg)
                .unwrap()
                .total;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad.count - fd).abs() / grad.count.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-6, "count grad {} vs fd {fd}", grad.count);
        }
    }

    #[test]
    fn loss_is_symmetric_and_scales_quadratically() {
        let cfg = LossConfig::default();
        let a = stack(&[vec![0.5, 0.0, 0.0, 0.0], vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0]], 2.0);
        let b = stack(&[vec![0.0; 4], vec![0.25, 0.0, 0.0, 0.0], vec![0.0; 4]], 5.0);
        let ab = composition_loss(&a, &b, &cfg).unwrap().total;
        let ba = composition_loss(&b, &a, &cfg).unwrap().total;
        assert_eq!(ab, ba);
    }
}
