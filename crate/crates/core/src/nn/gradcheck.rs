//! Central finite-difference checks of every backward pass.
//!
//! Each check compares analytic and numeric gradients of a scalar objective
//! and reports `max |a - n| / max(max |n|, max |a|, SCALE_FLOOR)` per tensor.
//! The floor keeps tensors whose true gradient vanishes (a convolution bias
//! feeding batch norm) from turning finite-difference round-off into a large
//! ratio.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::activation::{relu, relu_backward, sample_dropout_mask, sigmoid, sigmoid_backward, spatial_dropout3d};
use super::conv::{
    conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, upsample_nearest2,
    upsample_nearest2_backward, ConvSpec,
};
use super::loss::{hybrid_loss, LossClasses};
use super::norm::{batchnorm3d_backward, batchnorm3d_train};
use super::pool::{maxpool3d, maxpool3d_backward};
use super::tensor::{concat_channels, split_channels, Tensor5};
use super::unet::{init_params, Dropout, UNet, UNetConfig, UNetParams, UpsampleMode};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const SCALE_FLOOR: f64 = 1e-6;
pub const LAYER_THRESHOLD: f64 = 1e-5;
pub const NETWORK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub layer: String,
    pub tensor: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub checked: usize,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.threshold
    }
}

/// Relative error between analytic gradients and central differences of
/// `f` at the entries `idx` of `x`.
pub fn compare(x: &[f64], analytic: &[f64], idx: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    let (mut max_diff, mut max_n, mut max_a) = (0.0f64, 0.0f64, 0.0f64);
    for &i in idx {
        xp[i] = x[i] + FD_STEP;
        let fp = f(&xp);
        xp[i] = x[i] - FD_STEP;
        let fm = f(&xp);
        xp[i] = x[i];
        let n = (fp - fm) / (2.0 * FD_STEP);
        max_diff = max_diff.max((analytic[i] - n).abs());
        max_n = max_n.max(n.abs());
        max_a = max_a.max(analytic[i].abs());
    }
    max_diff / max_n.max(max_a).max(SCALE_FLOOR)
}

fn pick(len: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        sample(rng, len, cap).into_vec()
    }
}

fn random(shape: [usize; 5], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor5<f64> {
    let n = shape.iter().product();
    Tensor5::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

fn with(t: &Tensor5<f64>, data: &[f64]) -> Tensor5<f64> {
    Tensor5::from_vec(t.shape(), data.to_vec()).expect("same length")
}

struct Suite {
    rng: ChaCha8Rng,
    cap: usize,
    out: Vec<GradCheckEntry>,
}

impl Suite {
    fn record(&mut self, layer: &str, tensor: &str, threshold: f64, x: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64) {
        let idx = pick(x.len(), self.cap, &mut self.rng);
        let err = compare(x, analytic, &idx, f);
        self.out.push(GradCheckEntry {
            layer: layer.to_string(),
            tensor: tensor.to_string(),
            max_rel_error: err,
            threshold,
            checked: idx.len(),
        });
    }

    fn conv(&mut self, name: &str, spec: ConvSpec, ishape: [usize; 5], wshape: [usize; 5]) -> Result<()> {
        let x = random(ishape, -1.0, 1.0, &mut self.rng);
        let w = random(wshape, -1.0, 1.0, &mut self.rng);
        let b: Vec<f64> = (0..wshape[0]).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        let y = conv3d(&x, &w, &b, spec)?;
        let r = random(y.shape(), -1.0, 1.0, &mut self.rng);
        let g = conv3d_backward(&x, &w, &r, spec, true)?;
        let obj = |x: &Tensor5<f64>, w: &Tensor5<f64>, b: &[f64]| conv3d(x, w, b, spec).expect("valid").dot(&r);
        self.record(name, "input", 1e-6, x.data(), g.input.as_ref().expect("requested").data(), |d| obj(&with(&x, d), &w, &b));
        self.record(name, "weight", 1e-6, w.data(), &g.weight, |d| obj(&x, &with(&w, d), &b));
        self.record(name, "bias", 1e-6, &b, &g.bias, |d| obj(&x, &w, d));
        Ok(())
    }

    fn tconv(&mut self) -> Result<()> {
        let x = random([1, 2, 3, 3, 3], -1.0, 1.0, &mut self.rng);
        let w = random([2, 3, 2, 2, 2], -1.0, 1.0, &mut self.rng);
        let b: Vec<f64> = (0..3).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        let y = conv_transpose3d(&x, &w, &b)?;
        let r = random(y.shape(), -1.0, 1.0, &mut self.rng);
        let g = conv_transpose3d_backward(&x, &w, &r)?;
        let obj = |x: &Tensor5<f64>, w: &Tensor5<f64>, b: &[f64]| conv_transpose3d(x, w, b).expect("valid").dot(&r);
        let name = "upsample_tconv";
        self.record(name, "input", 1e-6, x.data(), g.input.as_ref().expect("requested").data(), |d| obj(&with(&x, d), &w, &b));
        self.record(name, "weight", 1e-6, w.data(), &g.weight, |d| obj(&x, &with(&w, d), &b));
        self.record(name, "bias", 1e-6, &b, &g.bias, |d| obj(&x, &w, d));
        Ok(())
    }

    fn nearest(&mut self) -> Result<()> {
        let x = random([1, 2, 2, 3, 2], -1.0, 1.0, &mut self.rng);
        let r = random([1, 2, 4, 6, 4], -1.0, 1.0, &mut self.rng);
        let g = upsample_nearest2_backward(&r);
        self.record("upsample_nearest", "input", 1e-6, x.data(), g.data(), |d| upsample_nearest2(&with(&x, d)).dot(&r));
        Ok(())
    }

    fn pool(&mut self) -> Result<()> {
        // distinct values well apart, so no step crosses a tie
        let n = 2 * 4 * 4 * 4;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, self.rng.gen_range(0..=i));
        }
        let x = Tensor5::from_vec([1, 2, 4, 4, 4], vals)?;
        let (y, arg) = maxpool3d(&x)?;
        let r = random(y.shape(), -1.0, 1.0, &mut self.rng);
        let g = maxpool3d_backward(&r, &arg, x.shape());
        self.record("maxpool3d", "input", 1e-6, x.data(), g.data(), |d| maxpool3d(&with(&x, d)).expect("even").0.dot(&r));
        Ok(())
    }

    fn batchnorm(&mut self) -> Result<()> {
        let x = random([2, 3, 3, 3, 3], -2.0, 2.0, &mut self.rng);
        let gamma: Vec<f64> = (0..3).map(|_| self.rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..3).map(|_| self.rng.gen_range(-0.5..0.5)).collect();
        let (y, cache) = batchnorm3d_train(&x, &gamma, &beta)?;
        let r = random(y.shape(), -1.0, 1.0, &mut self.rng);
        let (dx, dg, db) = batchnorm3d_backward(&r, &cache, &gamma);
        let obj = |x: &Tensor5<f64>, g: &[f64], b: &[f64]| batchnorm3d_train(x, g, b).expect("valid").0.dot(&r);
        self.record("batchnorm3d", "input", LAYER_THRESHOLD, x.data(), dx.data(), |d| obj(&with(&x, d), &gamma, &beta));
        self.record("batchnorm3d", "gamma", LAYER_THRESHOLD, &gamma, &dg, |d| obj(&x, d, &beta));
        self.record("batchnorm3d", "beta", LAYER_THRESHOLD, &beta, &db, |d| obj(&x, &gamma, d));
        Ok(())
    }

    fn activations(&mut self) -> Result<()> {
        let x = random([1, 2, 3, 3, 3], -4.0, 4.0, &mut self.rng);
        let r = random(x.shape(), -1.0, 1.0, &mut self.rng);
        let g = sigmoid_backward(&r, &sigmoid(&x));
        self.record("sigmoid", "input", 1e-8, x.data(), g.data(), |d| sigmoid(&with(&x, d)).dot(&r));
        // keep inputs away from the kink
        let x = x.map(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
        let g = relu_backward(&r, &relu(&x));
        self.record("relu", "input", 1e-8, x.data(), g.data(), |d| relu(&with(&x, d)).dot(&r));
        Ok(())
    }

    fn dropout(&mut self) -> Result<()> {
        let x = random([2, 4, 2, 2, 2], -1.0, 1.0, &mut self.rng);
        let mask = sample_dropout_mask::<f64>(2, 4, 0.5, &mut self.rng)?;
        let r = random(x.shape(), -1.0, 1.0, &mut self.rng);
        let g = spatial_dropout3d(&r, &mask)?;
        self.record("dropout_fixed_mask", "input", 1e-6, x.data(), g.data(), |d| {
            spatial_dropout3d(&with(&x, d), &mask).expect("valid").dot(&r)
        });
        Ok(())
    }

    /// conv -> concat with a second input -> conv.
    fn concat(&mut self) -> Result<()> {
        let spec = ConvSpec::SAME3;
        let a = random([1, 2, 4, 4, 4], -1.0, 1.0, &mut self.rng);
        let b = random([1, 3, 4, 4, 4], -1.0, 1.0, &mut self.rng);
        let w1 = random([2, 2, 3, 3, 3], -0.5, 0.5, &mut self.rng);
        let w2 = random([1, 5, 3, 3, 3], -0.5, 0.5, &mut self.rng);
        let forward = |a: &Tensor5<f64>, b: &Tensor5<f64>| -> (Tensor5<f64>, Tensor5<f64>, Tensor5<f64>) {
            let h = conv3d(a, &w1, &[0.0; 2], spec).expect("valid");
            let cat = concat_channels(&h, b).expect("same spatial");
            let y = conv3d(&cat, &w2, &[0.0], spec).expect("valid");
            (h, cat, y)
        };
        let (_, cat, y) = forward(&a, &b);
        let r = random(y.shape(), -1.0, 1.0, &mut self.rng);
        let gcat = conv3d_backward(&cat, &w2, &r, spec, true)?.input.expect("requested");
        let (gh, gb) = split_channels(&gcat, 2)?;
        let ga = conv3d_backward(&a, &w1, &gh, spec, true)?.input.expect("requested");
        self.record("concat", "first_branch_input", 1e-6, a.data(), ga.data(), |d| forward(&with(&a, d), &b).2.dot(&r));
        self.record("concat", "second_input", 1e-6, b.data(), gb.data(), |d| forward(&a, &with(&b, d)).2.dot(&r));
        Ok(())
    }

    fn loss(&mut self) -> Result<()> {
        let p = random([1, 1, 4, 4, 4], 0.05, 0.95, &mut self.rng);
        let t = random([1, 1, 4, 4, 4], 0.0, 1.0, &mut self.rng).map(|v| if v < 0.4 { 1.0 } else { 0.0 });
        for (classes, name) in [(LossClasses::Foreground, "hybrid_loss_foreground"), (LossClasses::Both, "hybrid_loss_two_class")] {
            let (_, g) = hybrid_loss(&p, &t, classes)?;
            self.record(name, "prediction", 1e-6, p.data(), g.data(), |d| hybrid_loss(&with(&p, d), &t, classes).expect("valid").0);
        }
        Ok(())
    }

    fn network(&mut self, name: &str, config: UNetConfig) -> Result<()> {
        let params: UNetParams<f64> = init_params(&config, self.rng.gen())?;
        let x = random([1, config.in_channels, 8, 8, 8], 0.0, 1.0, &mut self.rng);
        let t = random([1, 1, 8, 8, 8], 0.0, 1.0, &mut self.rng).map(|v| if v < 0.3 { 1.0 } else { 0.0 });
        let objective = |p: &UNetParams<f64>, x: &Tensor5<f64>| -> f64 {
            let (y, _) = UNet::new(p).forward_train(x, Dropout::Off).expect("valid");
            hybrid_loss(&y, &t, LossClasses::Both).expect("valid").0
        };
        let net = UNet::new(&params);
        let (y, tape) = net.forward_train(&x, Dropout::Off)?;
        let (_, gy) = hybrid_loss(&y, &t, LossClasses::Both)?;
        let grads = net.backward(&tape, &gy, true)?;
        let gx = grads.input.clone().expect("requested");
        self.record(name, "input", NETWORK_THRESHOLD, x.data(), gx.data(), |d| objective(&params, &with(&x, d)));
        for (i, tensor) in params.tensors.iter().enumerate() {
            if !tensor.kind.learnable() {
                continue;
            }
            let mut probe = params.clone();
            self.record(name, &tensor.name, NETWORK_THRESHOLD, tensor.data(), &grads.tensors[i], |d| {
                probe.tensors[i].data_mut().copy_from_slice(d);
                objective(&probe, &x)
            });
        }
        Ok(())
    }
}

/// Tiny network used by the end-to-end check.
pub fn tiny_config() -> UNetConfig {
    UNetConfig {
        in_channels: 2,
        base_channels: 2,
        depth: 2,
        dropout_rate: 0.0,
        ..Default::default()
    }
}

/// Runs every layer check and the end-to-end network checks. `cap` bounds
/// the number of entries probed per tensor.
pub fn run_gradcheck(seed: u64, cap: usize) -> Result<Vec<GradCheckEntry>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cap: cap.max(1),
        out: Vec::new(),
    };
    s.conv("conv3d", ConvSpec::SAME3, [1, 2, 5, 5, 5], [3, 2, 3, 3, 3])?;
    s.conv("conv3d_stride2", ConvSpec { kernel: 3, stride: 2, padding: 1 }, [1, 2, 5, 5, 5], [2, 2, 3, 3, 3])?;
    s.conv("conv3d_pointwise", ConvSpec::POINTWISE, [2, 3, 3, 2, 3], [2, 3, 1, 1, 1])?;
    s.pool()?;
    s.tconv()?;
    s.nearest()?;
    s.batchnorm()?;
    s.activations()?;
    s.dropout()?;
    s.concat()?;
    s.loss()?;
    s.network("unet", tiny_config())?;
    s.network(
        "unet_nearest",
        UNetConfig {
            upsample: UpsampleMode::NearestConv,
            ..tiny_config()
        },
    )?;
    Ok(s.out)
}

/// Fixed-width table of results, one row per tensor.
pub fn format_table(entries: &[GradCheckEntry]) -> String {
    let mut s = format!("{:<24} {:<28} {:>12} {:>10} {:>6}\n", "layer", "tensor", "max_rel_err", "threshold", "ok");
    for e in entries {
        s.push_str(&format!(
            "{:<24} {:<28} {:>12.3e} {:>10.0e} {:>6}\n",
            e.layer,
            e.tensor,
            e.max_rel_error,
            e.threshold,
            if e.passed() { "yes" } else { "NO" }
        ));
    }
    s
}
