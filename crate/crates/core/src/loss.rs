//! Per-branch soft Dice losses and the weighted multitask combination.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smoothing constant in numerator and denominator. Keeps empty-target
/// scans (no drusen) well-defined: empty target + empty prediction gives
/// loss 0 without special-casing.
pub const DICE_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("prediction/target shape mismatch: {pred:?} vs {target:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        target: (usize, usize),
    },
    #[error("target contains non-binary value {value} at ({row}, {col})")]
    NonBinaryTarget { value: f64, row: usize, col: usize },
    #[error("got {weights} weights for {branches} branches")]
    WeightCountMismatch { weights: usize, branches: usize },
    #[error("loss weights must be nonnegative and not all zero")]
    BadWeights,
    #[error("got {preds} predictions for {targets} targets")]
    BranchCountMismatch { preds: usize, targets: usize },
}

/// Which per-branch overlap loss to use.
///
/// `BinarySoftDice` is the plain soft Dice on the foreground map.
/// `TwoClassGdlInverseSquare` retains the background term and weights the
/// two classes by inverse squared target volume; a class with an empty
/// target is dropped from both sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    BinarySoftDice,
    TwoClassGdlInverseSquare,
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary_soft_dice" => Ok(Self::BinarySoftDice),
            "two_class_gdl_inverse_square" => Ok(Self::TwoClassGdlInverseSquare),
            other => Err(format!(
                "unknown loss variant {other:?} (expected binary_soft_dice or \
                 two_class_gdl_inverse_square)"
            )),
        }
    }
}

/// Per-branch loss weights (lambda_k in the linear combination).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub Vec<f64>);

impl LossWeights {
    pub fn equal(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn validate(&self, branches: usize) -> Result<(), LossError> {
        if self.0.len() != branches {
            return Err(LossError::WeightCountMismatch {
                weights: self.0.len(),
                branches,
            });
        }
        if self.0.iter().any(|&w| w < 0.0 || !w.is_finite())
            || self.0.iter().all(|&w| w == 0.0)
        {
            return Err(LossError::BadWeights);
        }
        Ok(())
    }
}

fn check_pair(
    pred: &ArrayView2<'_, f64>,
    target: &ArrayView2<'_, f64>,
) -> Result<(), LossError> {
    if pred.dim() != target.dim() {
        return Err(LossError::ShapeMismatch {
            pred: pred.dim(),
            target: target.dim(),
        });
    }
    for ((row, col), &value) in target.indexed_iter() {
        if value != 0.0 && value != 1.0 {
            return Err(LossError::NonBinaryTarget { value, row, col });
        }
    }
    Ok(())
}

/// Soft Dice loss `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn generalized_dice_loss(
    pred: &ArrayView2<'_, f64>,
    target: &ArrayView2<'_, f64>,
) -> Result<f64, LossError> {
    check_pair(pred, target)?;
    Ok(binary_soft_dice_value(pred, target))
}

fn binary_soft_dice_value(pred: &ArrayView2<'_, f64>, target: &ArrayView2<'_, f64>) -> f64 {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (&p, &g) in pred.iter().zip(target.iter()) {
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    1.0 - (2.0 * inter + DICE_EPSILON) / (sum_p + sum_g + DICE_EPSILON)
}

/// Value and gradient w.r.t. the prediction for one branch.
pub fn branch_loss_with_grad(
    pred: &ArrayView2<'_, f64>,
    target: &ArrayView2<'_, f64>,
    variant: LossVariant,
) -> Result<(f64, Array2<f64>), LossError> {
    check_pair(pred, target)?;
    match variant {
        LossVariant::BinarySoftDice => {
            let mut inter = 0.0;
            let mut sum_p = 0.0;
            let mut sum_g = 0.0;
            for (&p, &g) in pred.iter().zip(target.iter()) {
                inter += p * g;
                sum_p += p;
                sum_g += g;
            }
            let num = 2.0 * inter + DICE_EPSILON;
            let den = sum_p + sum_g + DICE_EPSILON;
            let loss = 1.0 - num / den;
            // d/dp_i [1 - N/D] = (N - 2*g_i*D) / D^2
            let den2 = den * den;
            let mut grad = Array2::zeros(pred.dim());
            ndarray::Zip::from(&mut grad).and(target).for_each(|out, &g| {
                *out = (num - 2.0 * g * den) / den2;
            });
            Ok((loss, grad))
        }
        LossVariant::TwoClassGdlInverseSquare => {
            let m = pred.len() as f64;
            let mut inter_f = 0.0;
            let mut sum_p = 0.0;
            let mut sum_g = 0.0;
            for (&p, &g) in pred.iter().zip(target.iter()) {
                inter_f += p * g;
                sum_p += p;
                sum_g += g;
            }
            let sum_pb = m - sum_p;
            let sum_gb = m - sum_g;
            let inter_b = inter_f + m - sum_p - sum_g; // sum((1-p)(1-g))
            let w_f = if sum_g > 0.0 { 1.0 / (sum_g * sum_g) } else { 0.0 };
            let w_b = if sum_gb > 0.0 { 1.0 / (sum_gb * sum_gb) } else { 0.0 };
            let num = 2.0 * (w_f * inter_f + w_b * inter_b) + DICE_EPSILON;
            let den = w_f * (sum_p + sum_g) + w_b * (sum_pb + sum_gb) + DICE_EPSILON;
            let loss = 1.0 - num / den;
            let den2 = den * den;
            // dN/dp_i = 2*(w_f*g_i - w_b*(1-g_i)); dD/dp_i = w_f - w_b.
            let dd = w_f - w_b;
            let mut grad = Array2::zeros(pred.dim());
            ndarray::Zip::from(&mut grad).and(target).for_each(|out, &g| {
                let dn = 2.0 * (w_f * g - w_b * (1.0 - g));
                *out = -(dn * den - num * dd) / den2;
            });
            Ok((loss, grad))
        }
    }
}

/// Result of the weighted multitask combination.
#[derive(Debug, Clone)]
pub struct MultitaskLoss {
    pub total: f64,
    pub per_branch: Vec<f64>,
}

/// `sum_k lambda_k * loss_k` over aligned prediction/target pairs.
pub fn multitask_loss(
    preds: &[ArrayView2<'_, f64>],
    targets: &[ArrayView2<'_, f64>],
    weights: &LossWeights,
    variant: LossVariant,
) -> Result<MultitaskLoss, LossError> {
    if preds.len() != targets.len() {
        return Err(LossError::BranchCountMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    weights.validate(preds.len())?;
    let mut per_branch = Vec::with_capacity(preds.len());
    let mut total = 0.0;
    for ((pred, target), &lambda) in preds.iter().zip(targets.iter()).zip(weights.0.iter()) {
        check_pair(pred, target)?;
        let value = match variant {
            LossVariant::BinarySoftDice => binary_soft_dice_value(pred, target),
            LossVariant::TwoClassGdlInverseSquare => {
                branch_loss_with_grad(pred, target, variant)?.0
            }
        };
        per_branch.push(value);
        total += lambda * value;
    }
    Ok(MultitaskLoss { total, per_branch })
}

/// Loss value plus `lambda_k`-scaled gradients per branch, ready to seed
/// backpropagation.
pub fn multitask_loss_with_grads(
    preds: &[ArrayView2<'_, f64>],
    targets: &[ArrayView2<'_, f64>],
    weights: &LossWeights,
    variant: LossVariant,
) -> Result<(MultitaskLoss, Vec<Array2<f64>>), LossError> {
    if preds.len() != targets.len() {
        return Err(LossError::BranchCountMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    weights.validate(preds.len())?;
    let mut per_branch = Vec::with_capacity(preds.len());
    let mut grads = Vec::with_capacity(preds.len());
    let mut total = 0.0;
    for ((pred, target), &lambda) in preds.iter().zip(targets.iter()).zip(weights.0.iter()) {
        let (value, mut grad) = branch_loss_with_grad(pred, target, variant)?;
        grad *= lambda;
        per_branch.push(value);
        total += lambda * value;
        grads.push(grad);
    }
    Ok((MultitaskLoss { total, per_branch }, grads))
}
