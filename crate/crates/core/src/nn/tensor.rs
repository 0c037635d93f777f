use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element of the network: f32 for training and inference,
/// f64 for gradient verification.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `C <- alpha * A B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense (batch, channel, depth, height, width) array, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<S> {
    shape: [usize; 5],
    data: Vec<S>,
}

impl<S: Scalar> Tensor5<S> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 {
            shape,
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 5], v: S) -> Self {
        Tensor5 {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "tensor {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    #[inline]
    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    /// Contiguous values of one (sample, channel) plane.
    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[S] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    #[inline]
    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    /// All channels of sample `n`.
    #[inline]
    pub fn sample(&self, n: usize) -> &[S] {
        let len = self.shape[1] * self.voxels();
        &self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn sample_mut(&mut self, n: usize) -> &mut [S] {
        let len = self.shape[1] * self.voxels();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor5<T> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|x| T::of(x.f64())).collect(),
        }
    }

    /// Inner product of two equally shaped tensors, accumulated in f64.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.f64() * b.f64()).sum()
    }
}

/// Channel-wise concatenation `[a, b]`.
pub fn concat_channels<S: Scalar>(a: &Tensor5<S>, b: &Tensor5<S>) -> Result<Tensor5<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
    }
    let mut out = Tensor5::zeros([sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]]);
    for n in 0..sa[0] {
        let dst = out.sample_mut(n);
        let la = a.sample(n).len();
        dst[..la].copy_from_slice(a.sample(n));
        dst[la..].copy_from_slice(b.sample(n));
    }
    Ok(out)
}

/// Backward of [`concat_channels`]: splits a gradient after `first` channels.
pub fn split_channels<S: Scalar>(g: &Tensor5<S>, first: usize) -> Result<(Tensor5<S>, Tensor5<S>)> {
    let s = g.shape();
    if first > s[1] {
        return Err(Error::Shape(format!("cannot split {} channels at {first}", s[1])));
    }
    let mut a = Tensor5::zeros([s[0], first, s[2], s[3], s[4]]);
    let mut b = Tensor5::zeros([s[0], s[1] - first, s[2], s[3], s[4]]);
    for n in 0..s[0] {
        let src = g.sample(n);
        let la = a.sample(n).len();
        a.sample_mut(n).copy_from_slice(&src[..la]);
        b.sample_mut(n).copy_from_slice(&src[la..]);
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_shapes_and_split_identity() {
        let a = Tensor5::from_vec([1, 2, 4, 4, 4], (0..128).map(|i| i as f64).collect()).unwrap();
        let b = Tensor5::from_vec([1, 3, 4, 4, 4], (0..192).map(|i| -(i as f64)).collect()).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [1, 5, 4, 4, 4]);
        let (ga, gb) = split_channels(&c, 2).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
        let bad = Tensor5::<f64>::zeros([1, 1, 4, 4, 2]);
        assert!(concat_channels(&a, &bad).is_err());
    }

    #[test]
    fn batched_concat_keeps_samples_apart() {
        let a = Tensor5::from_vec([2, 1, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor5::from_vec([2, 1, 1, 1, 2], vec![5.0f32, 6.0, 7.0, 8.0]).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }
}
