//! Batch normalization over (batch, depth, height, width) per channel.

use super::tensor::{Scalar, Tensor5};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values saved by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<S> {
    pub xhat: Tensor5<S>,
    pub inv_std: Vec<f64>,
    /// Batch mean and unbiased batch variance, for the running statistics.
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

fn check<S: Scalar>(x: &Tensor5<S>, gamma: &[S], beta: &[S]) -> Result<()> {
    if gamma.len() != x.channels() || beta.len() != x.channels() {
        return Err(Error::Shape(format!(
            "batch norm has {}/{} affine params for {} channels",
            gamma.len(),
            beta.len(),
            x.channels()
        )));
    }
    Ok(())
}

/// Normalizes with batch statistics (biased variance).
pub fn batchnorm3d_train<S: Scalar>(x: &Tensor5<S>, gamma: &[S], beta: &[S]) -> Result<(Tensor5<S>, BnCache<S>)> {
    check(x, gamma, beta)?;
    let (n, c) = (x.batch(), x.channels());
    let m = (n * x.voxels()) as f64;
    let mut y = Tensor5::zeros(x.shape());
    let mut xhat = Tensor5::zeros(x.shape());
    let mut inv_std = vec![0.0; c];
    let mut means = vec![0.0; c];
    let mut var_unbiased = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            sum += x.channel(s, ch).iter().map(|v| v.f64()).sum::<f64>();
        }
        let mean = sum / m;
        let mut ss = 0.0;
        for s in 0..n {
            ss += x.channel(s, ch).iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
        }
        let var = ss / m;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        let (g, b) = (gamma[ch].f64(), beta[ch].f64());
        for s in 0..n {
            let src = x.channel(s, ch);
            let xh = xhat.channel_mut(s, ch);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = S::of((v.f64() - mean) * istd);
            }
            let xh = xhat.channel(s, ch).to_vec();
            for (o, v) in y.channel_mut(s, ch).iter_mut().zip(xh) {
                *o = S::of(g * v.f64() + b);
            }
        }
        inv_std[ch] = istd;
        means[ch] = mean;
        var_unbiased[ch] = if m > 1.0 { ss / (m - 1.0) } else { 0.0 };
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean: means,
            var_unbiased,
        },
    ))
}

/// Normalizes with the running statistics.
pub fn batchnorm3d_eval<S: Scalar>(
    x: &Tensor5<S>,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
) -> Result<Tensor5<S>> {
    check(x, gamma, beta)?;
    let mut y = x.clone();
    for ch in 0..x.channels() {
        let istd = 1.0 / (running_var[ch].f64() + BN_EPS).sqrt();
        let scale = S::of(gamma[ch].f64() * istd);
        let shift = S::of(beta[ch].f64() - running_mean[ch].f64() * gamma[ch].f64() * istd);
        for s in 0..x.batch() {
            y.channel_mut(s, ch).iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    Ok(y)
}

/// Exponential running-average update with momentum 0.1.
pub fn update_running_stats<S: Scalar>(cache: &BnCache<S>, running_mean: &mut [S], running_var: &mut [S]) {
    for ch in 0..running_mean.len() {
        running_mean[ch] = S::of((1.0 - BN_MOMENTUM) * running_mean[ch].f64() + BN_MOMENTUM * cache.mean[ch]);
        running_var[ch] = S::of((1.0 - BN_MOMENTUM) * running_var[ch].f64() + BN_MOMENTUM * cache.var_unbiased[ch]);
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm3d_backward<S: Scalar>(
    grad_out: &Tensor5<S>,
    cache: &BnCache<S>,
    gamma: &[S],
) -> (Tensor5<S>, Vec<S>, Vec<S>) {
    let (n, c) = (grad_out.batch(), grad_out.channels());
    let m = (n * grad_out.voxels()) as f64;
    let mut dx = Tensor5::zeros(grad_out.shape());
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for s in 0..n {
            for (dy, xh) in grad_out.channel(s, ch).iter().zip(cache.xhat.channel(s, ch)) {
                sum_dy += dy.f64();
                sum_dy_xhat += dy.f64() * xh.f64();
            }
        }
        dgamma[ch] = S::of(sum_dy_xhat);
        dbeta[ch] = S::of(sum_dy);
        let k = gamma[ch].f64() * cache.inv_std[ch];
        let (mean_dy, mean_dy_xhat) = (sum_dy / m, sum_dy_xhat / m);
        for s in 0..n {
            let xh = cache.xhat.channel(s, ch);
            let dy = grad_out.channel(s, ch);
            let out = dx.channel_mut(s, ch);
            for i in 0..out.len() {
                out[i] = S::of(k * (dy[i].f64() - mean_dy - xh[i].f64() * mean_dy_xhat));
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn train_output_is_standardized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data = (0..2 * 3 * 64).map(|_| rng.gen_range(-5.0..7.0)).collect();
        let x = Tensor5::from_vec([2, 3, 4, 4, 4], data).unwrap();
        let (y, _) = batchnorm3d_train(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|s| y.channel(s, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn standardized_input_passes_through() {
        let x = Tensor5::from_vec([1, 1, 1, 1, 2], vec![-1.0f64, 1.0]).unwrap();
        let (y, _) = batchnorm3d_train(&x, &[1.0], &[0.0]).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_and_eval() {
        let x = Tensor5::from_vec([1, 1, 1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = batchnorm3d_train(&x, &[1.0], &[0.0]).unwrap();
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        update_running_stats(&cache, &mut rm, &mut rv);
        assert!((rm[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((rv[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let y = batchnorm3d_eval(&x, &[2.0], &[0.5], &[2.5], &[1.25 - BN_EPS]).unwrap();
        let s = 2.0 / 1.25f64.sqrt();
        assert!((y.data()[0] - (0.5 + (1.0 - 2.5) * s)).abs() < 1e-12);
    }
}
