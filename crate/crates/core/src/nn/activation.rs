use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor5};
use crate::error::{Error, Result};

/// Nonlinearity used inside the convolution blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
}

#[inline]
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid<S: Scalar>(x: &Tensor5<S>) -> Tensor5<S> {
    x.map(sigmoid_scalar)
}

/// Backward from the forward output `y`: `dx = dy * y * (1 - y)`.
pub fn sigmoid_backward<S: Scalar>(grad_out: &Tensor5<S>, y: &Tensor5<S>) -> Tensor5<S> {
    let mut g = grad_out.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv = *gv * yv * (S::one() - yv);
    }
    g
}

pub fn relu<S: Scalar>(x: &Tensor5<S>) -> Tensor5<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Backward from the forward output `y` (positive exactly where the input was).
pub fn relu_backward<S: Scalar>(grad_out: &Tensor5<S>, y: &Tensor5<S>) -> Tensor5<S> {
    let mut g = grad_out.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        if yv <= S::zero() {
            *gv = S::zero();
        }
    }
    g
}

impl Activation {
    pub fn forward<S: Scalar>(self, x: &Tensor5<S>) -> Tensor5<S> {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => relu(x),
        }
    }

    pub fn backward<S: Scalar>(self, grad_out: &Tensor5<S>, y: &Tensor5<S>) -> Tensor5<S> {
        match self {
            Activation::Sigmoid => sigmoid_backward(grad_out, y),
            Activation::Relu => relu_backward(grad_out, y),
        }
    }
}

/// Per-(sample, channel) multipliers of spatial dropout: 0 for dropped
/// channels, `1 / (1 - rate)` for kept ones.
pub fn sample_dropout_mask<S: Scalar>(batch: usize, channels: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = S::of(1.0 / (1.0 - rate));
    Ok((0..batch * channels)
        .map(|_| if rate > 0.0 && rng.gen_bool(rate) { S::zero() } else { keep })
        .collect())
}

/// Applies a channel mask from [`sample_dropout_mask`]. Also the backward
/// pass, since the map is linear.
pub fn spatial_dropout3d<S: Scalar>(x: &Tensor5<S>, mask: &[S]) -> Result<Tensor5<S>> {
    if mask.len() != x.batch() * x.channels() {
        return Err(Error::Shape(format!(
            "dropout mask has {} entries for {}x{} channels",
            mask.len(),
            x.batch(),
            x.channels()
        )));
    }
    let mut y = x.clone();
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let m = mask[n * x.channels() + c];
            if m != S::one() {
                y.channel_mut(n, c).iter_mut().for_each(|v| *v *= m);
            }
        }
    }
    Ok(y)
}
