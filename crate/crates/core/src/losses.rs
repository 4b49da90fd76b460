//! Dice-based segmentation, boundary and consistency losses with analytic
//! gradients.
//!
//! The typed functions take volume types and return scalars; the slice
//! functions work on flat `f64` buffers and also return gradients with
//! respect to the predictions, which is what the trainer uses.

use crate::morphology::{boundary_label, soft_erode_with_argmin, MorphologyError};
use crate::volume::{BinaryMask, ProbabilityMap, Shape3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what}: length {found} does not match {expected}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("dice epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("loss weight {name} must be finite and non-negative, got {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Morphology(#[from] MorphologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyVariant {
    #[default]
    Mse,
    Dice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_boundary: f64,
    pub lambda_cons: f64,
    pub consistency: ConsistencyVariant,
    pub dice_epsilon: f64,
    /// Treat the segmentation output as a constant inside the consistency
    /// target, so that term only trains the boundary head.
    pub stop_grad_seg: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_boundary: 30.0,
            lambda_cons: 0.3,
            consistency: ConsistencyVariant::Mse,
            dice_epsilon: 1e-5,
            stop_grad_seg: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        check_epsilon(self.dice_epsilon)?;
        for (name, value) in [
            ("lambda_boundary", self.lambda_boundary),
            ("lambda_cons", self.lambda_cons),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Per-term loss values; `total` includes the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub boundary: f64,
    pub consistency: f64,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.total += b.total;
            acc.seg += b.seg;
            acc.boundary += b.boundary;
            acc.consistency += b.consistency;
        }
        LossBreakdown {
            total: acc.total / n,
            seg: acc.seg / n,
            boundary: acc.boundary / n,
            consistency: acc.consistency / n,
        }
    }
}

/// Loss value with gradients for both heads (empty when a head is unused).
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub breakdown: LossBreakdown,
    pub grad_seg: Vec<f64>,
    pub grad_boundary: Vec<f64>,
}

fn check_epsilon(eps: f64) -> Result<(), LossError> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidEpsilon(eps))
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), LossError> {
    if expected == found {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch { what, expected, found })
    }
}

/// Sufficient statistics of a soft Dice loss.
#[derive(Debug, Clone, Copy)]
struct DiceStats {
    overlap: f64,
    sum: f64,
    eps: f64,
}

impl DiceStats {
    fn new(pred: &[f64], target: &[f64], eps: f64) -> Self {
        let mut overlap = 0.0;
        let mut sum = 0.0;
        for (&p, &t) in pred.iter().zip(target) {
            overlap += p * t;
            sum += p + t;
        }
        Self { overlap, sum, eps }
    }

    fn loss(&self) -> f64 {
        1.0 - (2.0 * self.overlap + self.eps) / (self.sum + self.eps)
    }

    /// Partial derivative with respect to one prediction voxel whose target
    /// is `other`; the loss is symmetric, so this also serves the target.
    fn partial(&self, other: f64) -> f64 {
        let den = self.sum + self.eps;
        -(2.0 * other * den - (2.0 * self.overlap + self.eps)) / (den * den)
    }
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` with its gradient
/// with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>), LossError> {
    check_epsilon(eps)?;
    check_len("dice target", pred.len(), target.len())?;
    let stats = DiceStats::new(pred, target, eps);
    Ok((stats.loss(), target.iter().map(|&t| stats.partial(t)).collect()))
}

fn dice_value(pred: &[f64], target: &[f64], eps: f64) -> Result<f64, LossError> {
    check_epsilon(eps)?;
    check_len("dice target", pred.len(), target.len())?;
    Ok(DiceStats::new(pred, target, eps).loss())
}

pub fn dice_loss(pred: &ProbabilityMap, target: &ProbabilityMap, eps: f64) -> Result<f64, LossError> {
    check_len("dice target", pred.shape().len(), target.shape().len())?;
    dice_value(&pred.to_f64(), &target.to_f64(), eps)
}

pub fn seg_loss(seg_pred: &ProbabilityMap, label: &BinaryMask, eps: f64) -> Result<f64, LossError> {
    check_len("label", seg_pred.shape().len(), label.shape().len())?;
    dice_value(&seg_pred.to_f64(), &label.to_f64(), eps)
}

pub fn boundary_loss(bnd_pred: &ProbabilityMap, label: &BinaryMask, r: usize, eps: f64) -> Result<f64, LossError> {
    check_len("label", bnd_pred.shape().len(), label.shape().len())?;
    let target = boundary_label(label, r)?;
    dice_value(&bnd_pred.to_f64(), &target.to_f64(), eps)
}

pub fn consistency_loss(
    bnd_pred: &ProbabilityMap,
    seg_pred: &ProbabilityMap,
    boundary_lbl: &BinaryMask,
    variant: ConsistencyVariant,
    eps: f64,
) -> Result<f64, LossError> {
    let n = bnd_pred.shape().len();
    check_len("segmentation prediction", n, seg_pred.shape().len())?;
    check_len("boundary label", n, boundary_lbl.shape().len())?;
    let (value, _, _) = consistency_grad(
        &bnd_pred.to_f64(),
        &seg_pred.to_f64(),
        &boundary_lbl.to_f64(),
        variant,
        eps,
        false,
    )?;
    Ok(value)
}

/// Consistency between the boundary output and `boundary ⊙ seg`; returns
/// the value and gradients with respect to the boundary and seg outputs.
pub fn consistency_grad(
    bnd: &[f64],
    seg: &[f64],
    boundary: &[f64],
    variant: ConsistencyVariant,
    eps: f64,
    stop_grad_seg: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    let n = bnd.len();
    check_len("segmentation prediction", n, seg.len())?;
    check_len("boundary label", n, boundary.len())?;
    let target: Vec<f64> = boundary.iter().zip(seg).map(|(b, s)| b * s).collect();
    let (value, g_bnd, g_target) = match variant {
        ConsistencyVariant::Mse => {
            let scale = 2.0 / n.max(1) as f64;
            let diff: Vec<f64> = bnd.iter().zip(&target).map(|(q, t)| q - t).collect();
            let value = diff.iter().map(|d| d * d).sum::<f64>() / n.max(1) as f64;
            let g_bnd: Vec<f64> = diff.iter().map(|d| scale * d).collect();
            let g_target = g_bnd.iter().map(|g| -g).collect::<Vec<_>>();
            (value, g_bnd, g_target)
        }
        ConsistencyVariant::Dice => {
            check_epsilon(eps)?;
            let stats = DiceStats::new(bnd, &target, eps);
            let g_bnd = target.iter().map(|&t| stats.partial(t)).collect();
            let g_target = bnd.iter().map(|&q| stats.partial(q)).collect::<Vec<_>>();
            (stats.loss(), g_bnd, g_target)
        }
    };
    let g_seg = if stop_grad_seg {
        vec![0.0; n]
    } else {
        g_target.iter().zip(boundary).map(|(g, b)| g * b).collect()
    };
    Ok((value, g_bnd, g_seg))
}

/// Full objective `seg + lambda_boundary * boundary + lambda_cons * cons`
/// for one item and one class. `boundary` is the precomputed boundary band
/// of `label`.
pub fn composite_loss(
    seg: &[f64],
    bnd: &[f64],
    label: &[f64],
    boundary: &[f64],
    w: &LossWeights,
) -> Result<LossWithGrad, LossError> {
    w.validate()?;
    let n = seg.len();
    check_len("boundary prediction", n, bnd.len())?;
    check_len("label", n, label.len())?;
    check_len("boundary label", n, boundary.len())?;
    let (seg_value, mut grad_seg) = dice_loss_grad(seg, label, w.dice_epsilon)?;
    let (bnd_value, mut grad_boundary) = dice_loss_grad(bnd, boundary, w.dice_epsilon)?;
    let (cons_value, g_cons_bnd, g_cons_seg) =
        consistency_grad(bnd, seg, boundary, w.consistency, w.dice_epsilon, w.stop_grad_seg)?;
    for (g, gc) in grad_boundary.iter_mut().zip(&g_cons_bnd) {
        *g = w.lambda_boundary * *g + w.lambda_cons * gc;
    }
    for (g, gc) in grad_seg.iter_mut().zip(&g_cons_seg) {
        *g += w.lambda_cons * gc;
    }
    let total = seg_value + w.lambda_boundary * bnd_value + w.lambda_cons * cons_value;
    Ok(LossWithGrad {
        breakdown: LossBreakdown {
            total,
            seg: seg_value,
            boundary: bnd_value,
            consistency: cons_value,
        },
        grad_seg,
        grad_boundary,
    })
}

/// Segmentation loss alone, for the single-task baseline; the other terms
/// are reported as zero and the boundary gradient is empty.
pub fn seg_only_loss(seg: &[f64], label: &[f64], eps: f64) -> Result<LossWithGrad, LossError> {
    let (value, grad_seg) = dice_loss_grad(seg, label, eps)?;
    Ok(LossWithGrad {
        breakdown: LossBreakdown {
            total: value,
            seg: value,
            ..LossBreakdown::default()
        },
        grad_seg,
        grad_boundary: Vec::new(),
    })
}

/// Average per-class losses; each entry is the result for one foreground
/// class, with gradients for that class's channel.
pub fn mean_over_classes(per_class: Vec<LossWithGrad>) -> LossWithGrad {
    let k = per_class.len().max(1) as f64;
    let breakdown = LossBreakdown::mean(&per_class.iter().map(|l| l.breakdown).collect::<Vec<_>>());
    let mut grad_seg = Vec::new();
    let mut grad_boundary = Vec::new();
    for l in per_class {
        grad_seg.extend(l.grad_seg.into_iter().map(|g| g / k));
        grad_boundary.extend(l.grad_boundary.into_iter().map(|g| g / k));
    }
    LossWithGrad {
        breakdown,
        grad_seg,
        grad_boundary,
    }
}

pub fn total_loss(
    seg_pred: &ProbabilityMap,
    bnd_pred: &ProbabilityMap,
    label: &BinaryMask,
    weights: &LossWeights,
    r: usize,
) -> Result<LossBreakdown, LossError> {
    let n = seg_pred.shape().len();
    check_len("boundary prediction", n, bnd_pred.shape().len())?;
    check_len("label", n, label.shape().len())?;
    let boundary = boundary_label(label, r)?;
    composite_loss(
        &seg_pred.to_f64(),
        &bnd_pred.to_f64(),
        &label.to_f64(),
        &boundary.to_f64(),
        weights,
    )
    .map(|l| l.breakdown)
}

/// Single-head boundary-penalty baseline:
/// `seg + lambda * dice(clamp(p - soft_erode(p, r)), boundary)`.
/// The boundary term is reported in `boundary`; its gradient is folded
/// into `grad_seg`.
pub fn peri_loss(
    seg: &[f64],
    shape: Shape3,
    label: &[f64],
    boundary: &[f64],
    lambda: f64,
    r: usize,
    eps: f64,
) -> Result<LossWithGrad, LossError> {
    let n = shape.len();
    check_len("segmentation prediction", n, seg.len())?;
    check_len("label", n, label.len())?;
    check_len("boundary label", n, boundary.len())?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(LossError::InvalidWeight {
            name: "lambda_boundary",
            value: lambda,
        });
    }
    let (seg_value, mut grad_seg) = dice_loss_grad(seg, label, eps)?;
    let (eroded, argmin) = soft_erode_with_argmin(seg, shape, r)?;
    let soft: Vec<f64> = seg.iter().zip(&eroded).map(|(p, e)| (p - e).clamp(0.0, 1.0)).collect();
    let (bnd_value, g_soft) = dice_loss_grad(&soft, boundary, eps)?;
    for i in 0..n {
        let raw = seg[i] - eroded[i];
        if !(0.0..=1.0).contains(&raw) {
            continue;
        }
        // a voxel that is its own window minimum has a constant zero band
        if argmin[i] == Some(i) {
            continue;
        }
        let g = lambda * g_soft[i];
        grad_seg[i] += g;
        if let Some(j) = argmin[i] {
            grad_seg[j] -= g;
        }
    }
    Ok(LossWithGrad {
        breakdown: LossBreakdown {
            total: seg_value + lambda * bnd_value,
            seg: seg_value,
            boundary: bnd_value,
            consistency: 0.0,
        },
        grad_seg,
        grad_boundary: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;

    fn cube_in(side: usize, lo: usize, hi: usize) -> BinaryMask {
        BinaryMask::from_fn(Shape3::cube(side), |i, j, k| {
            (lo..hi).contains(&i) && (lo..hi).contains(&j) && (lo..hi).contains(&k)
        })
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()
    }

    fn random_binary(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect()
    }

    #[test]
    fn dice_half_prediction_on_full_target() {
        let s = Shape3::cube(2);
        let loss = dice_loss(
            &ProbabilityMap::constant(s, 0.5),
            &ProbabilityMap::constant(s, 1.0),
            EPS,
        )
        .unwrap();
        assert!((loss - (1.0 - 8.0 / 12.0)).abs() < 1e-6);
        let seg = seg_loss(
            &ProbabilityMap::constant(s, 0.5),
            &BinaryMask::from_fn(s, |_, _, _| true),
            EPS,
        )
        .unwrap();
        assert_eq!(seg, loss);
    }

    #[test]
    fn dice_edge_cases() {
        let s = Shape3::cube(3);
        let m = cube_in(3, 0, 2);
        assert!(seg_loss(&m.to_probability(), &m, EPS).unwrap() < 1e-6);
        let inverted = BinaryMask::from_fn(s, |i, j, k| !m.get(i, j, k));
        assert!(seg_loss(&inverted.to_probability(), &m, EPS).unwrap() > 0.999);
        assert_eq!(
            seg_loss(&ProbabilityMap::constant(s, 0.0), &BinaryMask::zeros(s), EPS).unwrap(),
            0.0
        );
        assert!(matches!(
            dice_loss_grad(&[0.5], &[1.0], 0.0),
            Err(LossError::InvalidEpsilon(_))
        ));
        assert!(matches!(
            dice_loss_grad(&[0.5], &[1.0, 0.0], EPS),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn boundary_loss_full_cube_prediction() {
        // 5^3 cube: r=3 leaves a 3^3 core, so the band has 98 voxels.
        let label = cube_in(5, 0, 5);
        let loss = boundary_loss(&label.to_probability(), &label, 3, EPS).unwrap();
        let expected = 1.0 - (196.0 + EPS) / (223.0 + EPS);
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.1211).abs() < 1e-4);
    }

    #[test]
    fn boundary_loss_r1_targets_nothing() {
        let label = cube_in(6, 1, 5);
        let p = ProbabilityMap::constant(label.shape(), 0.3);
        let loss = boundary_loss(&p, &label, 1, EPS).unwrap();
        let empty = dice_loss(&p, &ProbabilityMap::constant(label.shape(), 0.0), EPS).unwrap();
        assert_eq!(loss, empty);
        let band = boundary_label(&label, 3).unwrap();
        assert!(boundary_loss(&band.to_probability(), &label, 3, EPS).unwrap() < 1e-6);
    }

    #[test]
    fn consistency_with_unit_segmentation_reduces_to_boundary_loss() {
        let s = Shape3::cube(6);
        let label = cube_in(6, 1, 5);
        let band = boundary_label(&label, 3).unwrap();
        let bnd = ProbabilityMap::new(s, random(s.len(), 1).iter().map(|&v| v as f32).collect()).unwrap();
        let ones = ProbabilityMap::constant(s, 1.0);
        let dice = consistency_loss(&bnd, &ones, &band, ConsistencyVariant::Dice, EPS).unwrap();
        assert_eq!(dice, boundary_loss(&bnd, &label, 3, EPS).unwrap());
        let mse = consistency_loss(&bnd, &ones, &band, ConsistencyVariant::Mse, EPS).unwrap();
        let direct: f64 = bnd
            .to_f64()
            .iter()
            .zip(band.to_f64())
            .map(|(q, b)| (q - b).powi(2))
            .sum::<f64>()
            / s.len() as f64;
        assert!((mse - direct).abs() < 1e-15);
    }

    #[test]
    fn consistency_vanishes_at_its_target() {
        let s = Shape3::cube(4);
        let seg = random(s.len(), 2);
        let band = random_binary(s.len(), 3);
        let bnd: Vec<f64> = seg.iter().zip(&band).map(|(a, b)| a * b).collect();
        let (mse, _, _) = consistency_grad(&bnd, &seg, &band, ConsistencyVariant::Mse, EPS, false).unwrap();
        assert_eq!(mse, 0.0);
        // soft Dice of a map with itself is only zero for binary maps
        let seg = random_binary(s.len(), 4);
        let bnd: Vec<f64> = seg.iter().zip(&band).map(|(a, b)| a * b).collect();
        let (dice, _, _) = consistency_grad(&bnd, &seg, &band, ConsistencyVariant::Dice, EPS, false).unwrap();
        assert!(dice < 1e-6);
    }

    /// 4^3 inputs with closed-form entries; the value was computed once by
    /// hand-written summation outside this crate and frozen.
    #[test]
    fn composite_regression_on_4_cube() {
        let n = 64;
        let seg: Vec<f64> = (0..n).map(|i| ((i * 37) % 64) as f64 / 64.0).collect();
        let bnd: Vec<f64> = (0..n).map(|i| ((i * 11 + 5) % 64) as f64 / 64.0).collect();
        let label: Vec<f64> = (0..n).map(|i| ((i % 3) != 0) as u8 as f64).collect();
        let band: Vec<f64> = (0..n).map(|i| (i % 3 == 1) as u8 as f64).collect();
        for (variant, expected) in [
            (ConsistencyVariant::Mse, REGRESSION_MSE),
            (ConsistencyVariant::Dice, REGRESSION_DICE),
        ] {
            let w = LossWeights {
                consistency: variant,
                ..LossWeights::default()
            };
            let out = composite_loss(&seg, &bnd, &label, &band, &w).unwrap();
            assert!(
                (out.breakdown.total - expected).abs() < 1e-12,
                "{variant:?}: {}",
                out.breakdown.total
            );
        }
    }

    const REGRESSION_MSE: f64 = 17.329636942628333;
    const REGRESSION_DICE: f64 = 17.47211828834032;

    #[test]
    fn composite_gradients_match_finite_differences() {
        let s = Shape3::cube(3);
        let n = s.len();
        let label = random_binary(n, 10);
        let band = random_binary(n, 11);
        for variant in [ConsistencyVariant::Mse, ConsistencyVariant::Dice] {
            for stop_grad_seg in [false, true] {
                let w = LossWeights {
                    consistency: variant,
                    stop_grad_seg,
                    ..LossWeights::default()
                };
                let seg = random(n, 12);
                let bnd = random(n, 13);
                let out = composite_loss(&seg, &bnd, &label, &band, &w).unwrap();
                let f = |seg: &[f64], bnd: &[f64]| composite_loss(seg, bnd, &label, &band, &w).unwrap().breakdown.total;
                let h = 1e-6;
                for i in 0..n {
                    let (mut sp, mut sm) = (seg.clone(), seg.clone());
                    sp[i] += h;
                    sm[i] -= h;
                    let fd_bnd = {
                        let (mut bp, mut bm) = (bnd.clone(), bnd.clone());
                        bp[i] += h;
                        bm[i] -= h;
                        (f(&seg, &bp) - f(&seg, &bm)) / (2.0 * h)
                    };
                    assert!((fd_bnd - out.grad_boundary[i]).abs() < 1e-6, "bnd {variant:?} {i}");
                    if !stop_grad_seg {
                        let fd_seg = (f(&sp, &bnd) - f(&sm, &bnd)) / (2.0 * h);
                        assert!((fd_seg - out.grad_seg[i]).abs() < 1e-6, "seg {variant:?} {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn stop_grad_removes_consistency_from_seg_gradient() {
        let n = 27;
        let (seg, bnd, label, band) = (random(n, 1), random(n, 2), random_binary(n, 3), random_binary(n, 4));
        let w = LossWeights {
            stop_grad_seg: true,
            ..LossWeights::default()
        };
        let out = composite_loss(&seg, &bnd, &label, &band, &w).unwrap();
        let (_, seg_only) = dice_loss_grad(&seg, &label, w.dice_epsilon).unwrap();
        assert_eq!(out.grad_seg, seg_only);
    }

    #[test]
    fn zero_weights_reduce_to_seg_loss() {
        let n = 64;
        let (seg, bnd, label, band) = (random(n, 5), random(n, 6), random_binary(n, 7), random_binary(n, 8));
        let w = LossWeights {
            lambda_boundary: 0.0,
            lambda_cons: 0.0,
            ..LossWeights::default()
        };
        let out = composite_loss(&seg, &bnd, &label, &band, &w).unwrap();
        assert_eq!(out.breakdown.total, out.breakdown.seg);
        assert!(out.grad_boundary.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let w = LossWeights {
            lambda_cons: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(
            w.validate(),
            Err(LossError::InvalidWeight {
                name: "lambda_cons",
                ..
            })
        ));
    }

    #[test]
    fn multiclass_mean_averages_values_and_scales_gradients() {
        let n = 8;
        let a = seg_only_loss(&random(n, 1), &random_binary(n, 2), EPS).unwrap();
        let b = seg_only_loss(&random(n, 3), &random_binary(n, 4), EPS).unwrap();
        let mean = mean_over_classes(vec![a.clone(), b.clone()]);
        assert!((mean.breakdown.total - (a.breakdown.total + b.breakdown.total) / 2.0).abs() < 1e-15);
        assert_eq!(mean.grad_seg.len(), 2 * n);
        assert_eq!(mean.grad_seg[0], a.grad_seg[0] / 2.0);
        assert_eq!(mean.grad_seg[n], b.grad_seg[0] / 2.0);
    }

    #[test]
    fn peri_loss_on_binary_prediction_vanishes() {
        let label = cube_in(8, 1, 7);
        let band = boundary_label(&label, 3).unwrap();
        let out = peri_loss(
            &label.to_f64(),
            label.shape(),
            &label.to_f64(),
            &band.to_f64(),
            30.0,
            3,
            EPS,
        )
        .unwrap();
        assert!(out.breakdown.total < 1e-5);
    }

    #[test]
    fn peri_loss_r1_is_seg_loss() {
        let s = Shape3::cube(4);
        let seg = random(s.len(), 4);
        let label = random_binary(s.len(), 5);
        let empty = vec![0.0; s.len()];
        let out = peri_loss(&seg, s, &label, &empty, 30.0, 1, EPS).unwrap();
        let (seg_value, grad) = dice_loss_grad(&seg, &label, EPS).unwrap();
        assert_eq!(out.breakdown.boundary, 0.0);
        assert_eq!(out.breakdown.total, seg_value);
        assert_eq!(out.grad_seg, grad);
    }

    #[test]
    fn peri_loss_regression_and_gradient() {
        let s = Shape3::cube(4);
        let n = s.len();
        let seg: Vec<f64> = (0..n).map(|i| 0.05 + 0.9 * ((i * 29 + 7) % 64) as f64 / 64.0).collect();
        let label: Vec<f64> = (0..n).map(|i| (((i * 13) % 64) < 30) as u8 as f64).collect();
        let band: Vec<f64> = (0..n).map(|i| (((i * 13) % 64) < 12) as u8 as f64).collect();
        let out = peri_loss(&seg, s, &label, &band, 30.0, 3, EPS).unwrap();
        assert!(
            (out.breakdown.total - REGRESSION_PERI).abs() < 1e-12,
            "{}",
            out.breakdown.total
        );
        let f = |p: &[f64]| peri_loss(p, s, &label, &band, 30.0, 3, EPS).unwrap().breakdown.total;
        let h = 1e-7;
        for i in 0..n {
            let (mut a, mut b) = (seg.clone(), seg.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - out.grad_seg[i]).abs() < 1e-5, "{i}: {fd} vs {}", out.grad_seg[i]);
        }
    }

    const REGRESSION_PERI: f64 = 22.405317619722062;

    proptest! {
        #[test]
        fn losses_are_finite_and_non_negative(seed in 0u64..1000, variant in prop_oneof![Just(ConsistencyVariant::Mse), Just(ConsistencyVariant::Dice)]) {
            let n = 27;
            let w = LossWeights { consistency: variant, ..LossWeights::default() };
            let out = composite_loss(&random(n, seed), &random(n, seed + 1), &random_binary(n, seed + 2), &random_binary(n, seed + 3), &w).unwrap();
            let b = out.breakdown;
            for v in [b.total, b.seg, b.boundary, b.consistency] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }

        #[test]
        fn total_is_affine_in_weights(seed in 0u64..1000, lb in 0.0f64..100.0, lc in 0.0f64..10.0) {
            let n = 27;
            let (seg, bnd, label, band) = (random(n, seed), random(n, seed + 1), random_binary(n, seed + 2), random_binary(n, seed + 3));
            let w = LossWeights { lambda_boundary: lb, lambda_cons: lc, ..LossWeights::default() };
            let b = composite_loss(&seg, &bnd, &label, &band, &w).unwrap().breakdown;
            prop_assert_eq!(b.total, b.seg + lb * b.boundary + lc * b.consistency);
        }
    }
}
