//! Hybrid cross-entropy / soft-Dice voxel loss.
//!
//! For foreground probability `p` and label `g` every voxel contributes
//! `g log p + 2 g p / (g^2 + p^2 + eps)` and the loss is the negated mean.
//! With two classes the background term (labels `1 - g`, probabilities
//! `1 - p`) is added to each voxel; with one class background voxels carry
//! no gradient at all.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor5};
use crate::error::{Error, Result};

pub const LOSS_EPS: f64 = 1e-7;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossClasses {
    /// Foreground term only.
    Foreground,
    /// Foreground and background terms.
    #[default]
    Both,
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-voxel term and its derivative with respect to `p` (evaluated at the
/// clamped probability).
#[inline]
fn term(g: f64, p: f64) -> (f64, f64) {
    let den = g * g + p * p + LOSS_EPS;
    let value = g * p.ln() + 2.0 * g * p / den;
    let d = g / p + 2.0 * g * (den - 2.0 * p * p) / (den * den);
    (value, d)
}

/// Loss of one voxel (used by tests and reports).
pub fn voxel_loss(g: f64, p: f64, classes: LossClasses) -> f64 {
    let p = clamp(p);
    let mut v = term(g, p).0;
    if classes == LossClasses::Both {
        v += term(1.0 - g, 1.0 - p).0;
    }
    -v
}

/// Mean loss over all voxels and `dL/dp` per voxel.
pub fn hybrid_loss<S: Scalar>(pred: &Tensor5<S>, target: &Tensor5<S>, classes: LossClasses) -> Result<(f64, Tensor5<S>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("loss over zero voxels".into()));
    }
    if let Some(g) = target.data().iter().find(|g| g.f64() != 0.0 && g.f64() != 1.0) {
        return Err(Error::InvalidArgument(format!("target must be binary, found {}", g.f64())));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor5::zeros(pred.shape());
    let mut total = 0.0;
    for ((gv, &p), &g) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let (p, g) = (clamp(p.f64()), g.f64());
        let (mut v, mut d) = term(g, p);
        if classes == LossClasses::Both {
            let (vb, db) = term(1.0 - g, 1.0 - p);
            v += vb;
            d -= db;
        }
        total += v;
        *gv = S::of(-d / n);
    }
    let loss = -total / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    Ok((loss, grad))
}
