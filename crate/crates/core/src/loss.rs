//! Cross-entropy over predicted probabilities, its class-weighted form, and
//! the inverse-frequency class weights `w_c = 1 − n_c / N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Allowed deviation of a probability row sum from 1.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        ClassWeights { weights: vec![1.0; classes], counts: vec![0; classes], total: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Classes whose weight is exactly zero (they hold every sample).
    pub fn zero_weight_classes(&self) -> Vec<usize> {
        self.weights.iter().enumerate().filter(|(_, &w)| w == 0.0).map(|(c, _)| c).collect()
    }
}

/// `w_c = 1 − n_c / N` for per-class sample counts `n_c`.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.len() < 2 {
        return Err(Error::InvalidData(format!("need at least 2 classes, got {}", counts.len())));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::AllZeroCounts);
    }
    let weights: Vec<f64> = counts.iter().map(|&c| 1.0 - c as f64 / total as f64).collect();
    for (c, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            log::warn!("class {c} holds all {total} samples; its loss weight is 0");
        }
    }
    Ok(ClassWeights { weights, counts: counts.to_vec(), total })
}

fn validate<T: Element>(probs: &Tensor<T>, targets: &[usize]) -> Result<usize> {
    let &[rows, classes] = probs.shape() else {
        return Err(Error::shape(format!("probabilities must be [batch, classes], got {:?}", probs.shape())));
    };
    if rows != targets.len() {
        return Err(Error::LengthMismatch(rows, targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::InvalidTarget { target: t, classes });
    }
    for (row, chunk) in probs.data().chunks(classes).enumerate() {
        let sum: f64 = chunk.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE || chunk.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::NotADistribution { row, sum });
        }
    }
    Ok(classes)
}

fn log_true_class<'t, T: Element>(probs: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
    probs.pick(targets)?.clamp(PROB_FLOOR, 1.0)?.ln()
}

/// Batch mean of `−ln p[o, target_o]`.
pub fn cross_entropy<'t, T: Element>(probs: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
    validate(&probs.value()?, targets)?;
    log_true_class(probs, targets)?.neg()?.mean()
}

/// Batch mean of `−w[target_o] · ln p[o, target_o]`.
pub fn weighted_cross_entropy<'t, T: Element>(
    probs: Var<'t, T>,
    targets: &[usize],
    weights: &ClassWeights,
) -> Result<Var<'t, T>> {
    let classes = validate(&probs.value()?, targets)?;
    if weights.num_classes() != classes {
        return Err(Error::WeightDimensionMismatch { expected: classes, got: weights.num_classes() });
    }
    let per_sample: Vec<T> = targets.iter().map(|&t| T::from_f64(weights.weights[t])).collect();
    let w = probs.tape().constant(&Tensor::new(&[targets.len()], per_sample)?);
    log_true_class(probs, targets)?.mul(&w)?.neg()?.mean()
}
