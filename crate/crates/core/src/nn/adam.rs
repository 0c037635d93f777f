use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use super::unet::{Grads, UNetParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in f64 per learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(config: AdamConfig, params: &UNetParams<S>) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| if t.kind.learnable() { vec![0.0; t.value.len()] } else { Vec::new() })
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<S: Scalar>(&mut self, params: &mut UNetParams<S>, grads: &Grads<S>) -> Result<()> {
        if grads.tensors.len() != params.tensors.len() || self.m.len() != params.tensors.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            if !p.kind.learnable() {
                continue;
            }
            let g = &grads.tensors[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if g.len() != p.value.len() || m.len() != g.len() {
                return Err(Error::Shape(format!("gradient of {} has wrong length", p.name)));
            }
            for (((w, &gs), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gs.f64();
                if !gv.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
                }
                *w = S::of(w.f64() - moment_step(&c, bc1, bc2, gv, mi, vi));
            }
        }
        Ok(())
    }

    /// One step on a plain parameter vector with its own moment buffers.
    pub fn step_slice(config: &AdamConfig, t: u64, theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]) {
        let bc1 = 1.0 - config.beta1.powi(t as i32);
        let bc2 = 1.0 - config.beta2.powi(t as i32);
        for (((w, &g), mi), vi) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w -= moment_step(config, bc1, bc2, g, mi, vi);
        }
    }
}

#[inline]
fn moment_step(c: &AdamConfig, bc1: f64, bc2: f64, g: f64, m: &mut f64, v: &mut f64) -> f64 {
    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
    let mhat = *m / bc1;
    let vhat = *v / bc2;
    c.lr * mhat / (vhat.sqrt() + c.eps)
}
