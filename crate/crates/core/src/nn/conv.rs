//! 3D convolution (direct or im2col + GEMM), transposed convolution and nearest
//! upsampling, each with a hand-written backward pass.

use super::direct;
use super::tensor::{Scalar, Tensor5};
use crate::error::{Error, Result};

/// Cubic kernel geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec {
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    pub const POINTWISE: ConvSpec = ConvSpec {
        kernel: 1,
        stride: 1,
        padding: 0,
    };
    pub const DOWN2: ConvSpec = ConvSpec {
        kernel: 2,
        stride: 2,
        padding: 0,
    };

    fn out_dim(&self, i: usize) -> Result<usize> {
        let span = i + 2 * self.padding;
        if span < self.kernel || self.stride == 0 {
            return Err(Error::Shape(format!("input extent {i} too small for {self:?}")));
        }
        Ok((span - self.kernel) / self.stride + 1)
    }

    pub fn out_spatial(&self, d: [usize; 3]) -> Result<[usize; 3]> {
        Ok([self.out_dim(d[0])?, self.out_dim(d[1])?, self.out_dim(d[2])?])
    }
}

/// Gradients of a convolution-like layer.
#[derive(Debug, Clone)]
pub struct ConvGrads<S> {
    pub input: Option<Tensor5<S>>,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

const CHUNK_ELEMS: usize = 1 << 22;

struct Im2Col {
    c_in: usize,
    k: usize,
    s: usize,
    p: usize,
    ind: [usize; 3],
    outd: [usize; 3],
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.outd[1] * self.outd[2]
    }

    fn planes_per_chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.rows() * self.plane()).max(1)).clamp(1, self.outd[0])
    }

    /// Valid output range along an axis for kernel offset `kk`: outputs `o`
    /// with `0 <= o*s + kk - p < n`.
    #[inline]
    fn valid(&self, kk: usize, n: usize, on: usize) -> (usize, usize) {
        let (s, p) = (self.s as i64, self.p as i64);
        let lo = ((p - kk as i64) + s - 1).div_euclid(s).max(0);
        let hi = ((n as i64 - 1 + p - kk as i64).div_euclid(s) + 1).min(on as i64);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    /// Visits the receptive-field segments of output planes `oz0..oz1`:
    /// `f(vol_start, vol_step, col_start, len)` pairs `len` input voxels
    /// (stepping by `vol_step` in one sample, all channels) with a contiguous
    /// run of `col` (`rows x chunk`, row-major).
    fn segments(&self, oz0: usize, oz1: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [id, ih, iw] = self.ind;
        let [_, oh, ow] = self.outd;
        let plane = self.plane();
        let chunk = (oz1 - oz0) * plane;
        let k = self.k;
        let in_vox = id * ih * iw;
        for ci in 0..self.c_in {
            let vin = ci * in_vox;
            for kz in 0..k {
                let (zlo, zhi) = self.valid(kz, id, self.outd[0]);
                for ky in 0..k {
                    let (ylo, yhi) = self.valid(ky, ih, oh);
                    for kx in 0..k {
                        let (xlo, xhi) = self.valid(kx, iw, ow);
                        if xhi == xlo {
                            continue;
                        }
                        let row = ((ci * k + kz) * k + ky) * k + kx;
                        for oz in oz0.max(zlo)..oz1.min(zhi) {
                            let iz = oz * self.s + kz - self.p;
                            let zbase = row * chunk + (oz - oz0) * plane;
                            for oy in ylo..yhi {
                                let iy = oy * self.s + ky - self.p;
                                let ix0 = xlo * self.s + kx - self.p;
                                f(vin + (iz * ih + iy) * iw + ix0, self.s, zbase + oy * ow + xlo, xhi - xlo);
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather<S: Scalar>(&self, vol: &[S], col: &mut [S], oz0: usize, oz1: usize) {
        col.iter_mut().for_each(|v| *v = S::zero());
        self.segments(oz0, oz1, |vs, step, cs, len| {
            let dst = &mut col[cs..cs + len];
            if step == 1 {
                dst.copy_from_slice(&vol[vs..vs + len]);
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = vol[vs + i * step];
                }
            }
        });
    }

    fn scatter_add<S: Scalar>(&self, vol: &mut [S], col: &[S], oz0: usize, oz1: usize) {
        self.segments(oz0, oz1, |vs, step, cs, len| {
            let src = &col[cs..cs + len];
            if step == 1 {
                for (a, b) in vol[vs..vs + len].iter_mut().zip(src) {
                    *a += *b;
                }
            } else {
                for (i, b) in src.iter().enumerate() {
                    vol[vs + i * step] += *b;
                }
            }
        });
    }
}

fn check_conv<S: Scalar>(input: &Tensor5<S>, weight: &Tensor5<S>, bias: &[S], spec: ConvSpec) -> Result<[usize; 3]> {
    let ws = weight.shape();
    if ws[2] != spec.kernel || ws[3] != spec.kernel || ws[4] != spec.kernel {
        return Err(Error::Shape(format!("weight {ws:?} does not match kernel {}", spec.kernel)));
    }
    if ws[1] != input.channels() {
        return Err(Error::Shape(format!(
            "weight expects {} input channels, input has {}",
            ws[1],
            input.channels()
        )));
    }
    if bias.len() != ws[0] {
        return Err(Error::Shape(format!("bias has {} entries for {} outputs", bias.len(), ws[0])));
    }
    spec.out_spatial(input.spatial())
}

/// Cross-correlation with zero padding. `weight` is `(c_out, c_in, k, k, k)`.
pub fn conv3d<S: Scalar>(input: &Tensor5<S>, weight: &Tensor5<S>, bias: &[S], spec: ConvSpec) -> Result<Tensor5<S>> {
    let outd = check_conv(input, weight, bias, spec)?;
    let c_out = weight.shape()[0];
    let n_batch = input.batch();
    if use_direct(spec, input.channels(), c_out, input.spatial()[2]) {
        let mut out = Tensor5::zeros([n_batch, c_out, outd[0], outd[1], outd[2]]);
        for n in 0..n_batch {
            let xp = direct::pad1(input.sample(n), input.channels(), outd);
            direct::forward(&xp, input.channels(), outd, weight.data(), bias, out.sample_mut(n));
        }
        return Ok(out);
    }
    let ic = Im2Col {
        c_in: input.channels(),
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        ind: input.spatial(),
        outd,
    };
    let rows = ic.rows();
    let plane = ic.plane();
    let out_vox = outd[0] * plane;
    let mut out = Tensor5::zeros([n_batch, c_out, outd[0], outd[1], outd[2]]);
    let ppc = ic.planes_per_chunk();
    let mut col = vec![S::zero(); rows * ppc * plane];
    for n in 0..n_batch {
        let vol = input.sample(n);
        let dst: &mut [S] = out.sample_mut(n);
        let mut oz0 = 0;
        while oz0 < outd[0] {
            let oz1 = (oz0 + ppc).min(outd[0]);
            let chunk = (oz1 - oz0) * plane;
            ic.gather(vol, &mut col[..rows * chunk], oz0, oz1);
            unsafe {
                S::gemm(
                    c_out,
                    rows,
                    chunk,
                    S::one(),
                    weight.data().as_ptr(),
                    rows as isize,
                    1,
                    col.as_ptr(),
                    chunk as isize,
                    1,
                    S::zero(),
                    dst.as_mut_ptr().add(oz0 * plane),
                    out_vox as isize,
                    1,
                );
            }
            oz0 = oz1;
        }
        for (co, &b) in bias.iter().enumerate() {
            if b != S::zero() {
                dst[co * out_vox..(co + 1) * out_vox].iter_mut().for_each(|v| *v += b);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d`] given the upstream gradient. The input gradient
/// is skipped when `need_input` is false.
pub fn conv3d_backward<S: Scalar>(
    input: &Tensor5<S>,
    weight: &Tensor5<S>,
    grad_out: &Tensor5<S>,
    spec: ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<S>> {
    let c_out = weight.shape()[0];
    let outd = check_conv(input, weight, &vec![S::zero(); c_out], spec)?;
    if grad_out.shape() != [input.batch(), c_out, outd[0], outd[1], outd[2]] {
        return Err(Error::Shape(format!("grad_out {:?} does not match conv output", grad_out.shape())));
    }
    if use_direct(spec, input.channels(), c_out, input.spatial()[2]) {
        return Ok(direct_backward(input, weight, grad_out, need_input));
    }
    let ic = Im2Col {
        c_in: input.channels(),
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        ind: input.spatial(),
        outd,
    };
    let rows = ic.rows();
    let plane = ic.plane();
    let out_vox = outd[0] * plane;
    let ppc = ic.planes_per_chunk();
    let mut col = vec![S::zero(); rows * ppc * plane];
    let mut grad_w = vec![S::zero(); c_out * rows];
    let mut grad_b = vec![S::zero(); c_out];
    let mut grad_in = need_input.then(|| Tensor5::zeros(input.shape()));
    for n in 0..input.batch() {
        let go = grad_out.sample(n);
        for co in 0..c_out {
            grad_b[co] += go[co * out_vox..(co + 1) * out_vox].iter().copied().sum::<S>();
        }
        let vol = input.sample(n);
        let mut oz0 = 0;
        while oz0 < outd[0] {
            let oz1 = (oz0 + ppc).min(outd[0]);
            let chunk = (oz1 - oz0) * plane;
            ic.gather(vol, &mut col[..rows * chunk], oz0, oz1);
            unsafe {
                // dW += dY_chunk * col^T
                S::gemm(
                    c_out,
                    chunk,
                    rows,
                    S::one(),
                    go.as_ptr().add(oz0 * plane),
                    out_vox as isize,
                    1,
                    col.as_ptr(),
                    1,
                    chunk as isize,
                    S::one(),
                    grad_w.as_mut_ptr(),
                    rows as isize,
                    1,
                );
            }
            if let Some(gi) = grad_in.as_mut() {
                unsafe {
                    // dcol = W^T * dY_chunk
                    S::gemm(
                        rows,
                        c_out,
                        chunk,
                        S::one(),
                        weight.data().as_ptr(),
                        1,
                        rows as isize,
                        go.as_ptr().add(oz0 * plane),
                        out_vox as isize,
                        1,
                        S::zero(),
                        col.as_mut_ptr(),
                        chunk as isize,
                        1,
                    );
                }
                ic.scatter_add(gi.sample_mut(n), &col[..rows * chunk], oz0, oz1);
            }
            oz0 = oz1;
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

/// Narrow 3x3x3 layers on long rows are memory-bound through the column
/// matrix; the direct kernel wins there.
const DIRECT_MAX_PAIRS: usize = 512;
const DIRECT_MIN_ROW: usize = 24;

fn use_direct(spec: ConvSpec, c_in: usize, c_out: usize, row: usize) -> bool {
    spec == ConvSpec::SAME3 && c_in * c_out <= DIRECT_MAX_PAIRS && row >= DIRECT_MIN_ROW
}

fn direct_backward<S: Scalar>(input: &Tensor5<S>, weight: &Tensor5<S>, grad_out: &Tensor5<S>, need_input: bool) -> ConvGrads<S> {
    let (c_in, c_out) = (input.channels(), weight.shape()[0]);
    let d = input.spatial();
    let vox = input.voxels();
    let mut grad_w = vec![S::zero(); weight.len()];
    let mut grad_b = vec![S::zero(); c_out];
    let mut grad_in = need_input.then(|| Tensor5::zeros(input.shape()));
    let adjoint = need_input.then(|| direct::adjoint_weight(weight.data(), c_out, c_in));
    let zero_bias = vec![S::zero(); c_in];
    for n in 0..input.batch() {
        let go = grad_out.sample(n);
        for co in 0..c_out {
            grad_b[co] += go[co * vox..(co + 1) * vox].iter().copied().sum::<S>();
        }
        let xp = direct::pad1(input.sample(n), c_in, d);
        direct::grad_weight(&xp, c_in, d, go, c_out, &mut grad_w);
        if let (Some(gi), Some(wt)) = (grad_in.as_mut(), adjoint.as_ref()) {
            let gp = direct::pad1(go, c_out, d);
            direct::forward(&gp, c_out, d, wt, &zero_bias, gi.sample_mut(n));
        }
    }
    ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    }
}

fn check_tconv<S: Scalar>(input: &Tensor5<S>, weight: &Tensor5<S>, bias: &[S]) -> Result<usize> {
    let ws = weight.shape();
    if ws[2..] != [2, 2, 2] {
        return Err(Error::Shape(format!("transposed conv weight {ws:?} must have a 2x2x2 kernel")));
    }
    if ws[0] != input.channels() {
        return Err(Error::Shape(format!(
            "transposed conv expects {} input channels, input has {}",
            ws[0],
            input.channels()
        )));
    }
    if bias.len() != ws[1] {
        return Err(Error::Shape(format!("bias has {} entries for {} outputs", bias.len(), ws[1])));
    }
    Ok(ws[1])
}

/// Transposed convolution, kernel 2 stride 2: doubles every spatial extent.
/// `weight` is `(c_in, c_out, 2, 2, 2)`.
pub fn conv_transpose3d<S: Scalar>(input: &Tensor5<S>, weight: &Tensor5<S>, bias: &[S]) -> Result<Tensor5<S>> {
    let c_out = check_tconv(input, weight, bias)?;
    let c_in = input.channels();
    let [d, h, w] = input.spatial();
    let vin = d * h * w;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = Tensor5::zeros([input.batch(), c_out, od, oh, ow]);
    let mut tmp = vec![S::zero(); c_out * 8 * vin];
    for n in 0..input.batch() {
        unsafe {
            S::gemm(
                c_out * 8,
                c_in,
                vin,
                S::one(),
                weight.data().as_ptr(),
                1,
                (c_out * 8) as isize,
                input.sample(n).as_ptr(),
                vin as isize,
                1,
                S::zero(),
                tmp.as_mut_ptr(),
                vin as isize,
                1,
            );
        }
        let dst = out.sample_mut(n);
        let out_vox = od * oh * ow;
        for co in 0..c_out {
            for off in 0..8 {
                let (a, b, c) = (off >> 2, (off >> 1) & 1, off & 1);
                let src = &tmp[(co * 8 + off) * vin..(co * 8 + off + 1) * vin];
                for z in 0..d {
                    for y in 0..h {
                        let row = co * out_vox + ((2 * z + a) * oh + 2 * y + b) * ow + c;
                        let s = &src[(z * h + y) * w..(z * h + y + 1) * w];
                        for (x, &v) in s.iter().enumerate() {
                            dst[row + 2 * x] = v + bias[co];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose3d_backward<S: Scalar>(
    input: &Tensor5<S>,
    weight: &Tensor5<S>,
    grad_out: &Tensor5<S>,
) -> Result<ConvGrads<S>> {
    let c_out = weight.shape()[1];
    check_tconv(input, weight, &vec![S::zero(); c_out])?;
    let c_in = input.channels();
    let [d, h, w] = input.spatial();
    let vin = d * h * w;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    if grad_out.shape() != [input.batch(), c_out, od, oh, ow] {
        return Err(Error::Shape(format!("grad_out {:?} does not match transposed conv output", grad_out.shape())));
    }
    let out_vox = od * oh * ow;
    let mut gathered = vec![S::zero(); c_out * 8 * vin];
    let mut grad_in = Tensor5::zeros(input.shape());
    let mut grad_w = vec![S::zero(); c_in * c_out * 8];
    let mut grad_b = vec![S::zero(); c_out];
    for n in 0..input.batch() {
        let go = grad_out.sample(n);
        for co in 0..c_out {
            grad_b[co] += go[co * out_vox..(co + 1) * out_vox].iter().copied().sum::<S>();
            for off in 0..8 {
                let (a, b, c) = (off >> 2, (off >> 1) & 1, off & 1);
                let dst = &mut gathered[(co * 8 + off) * vin..(co * 8 + off + 1) * vin];
                for z in 0..d {
                    for y in 0..h {
                        let row = co * out_vox + ((2 * z + a) * oh + 2 * y + b) * ow + c;
                        for x in 0..w {
                            dst[(z * h + y) * w + x] = go[row + 2 * x];
                        }
                    }
                }
            }
        }
        unsafe {
            S::gemm(
                c_in,
                c_out * 8,
                vin,
                S::one(),
                weight.data().as_ptr(),
                (c_out * 8) as isize,
                1,
                gathered.as_ptr(),
                vin as isize,
                1,
                S::zero(),
                grad_in.sample_mut(n).as_mut_ptr(),
                vin as isize,
                1,
            );
            S::gemm(
                c_in,
                vin,
                c_out * 8,
                S::one(),
                input.sample(n).as_ptr(),
                vin as isize,
                1,
                gathered.as_ptr(),
                1,
                vin as isize,
                S::one(),
                grad_w.as_mut_ptr(),
                (c_out * 8) as isize,
                1,
            );
        }
    }
    Ok(ConvGrads {
        input: Some(grad_in),
        weight: grad_w,
        bias: grad_b,
    })
}

/// Nearest-neighbour upsampling by 2 along every spatial axis.
pub fn upsample_nearest2<S: Scalar>(input: &Tensor5<S>) -> Tensor5<S> {
    let [n, c, d, h, w] = input.shape();
    let mut out = Tensor5::zeros([n, c, 2 * d, 2 * h, 2 * w]);
    for nc in 0..n * c {
        let src = &input.data()[nc * d * h * w..(nc + 1) * d * h * w];
        let dst = &mut out.data_mut()[nc * 8 * d * h * w..(nc + 1) * 8 * d * h * w];
        for z in 0..2 * d {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[(z * 2 * h + y) * 2 * w + x] = src[((z / 2) * h + y / 2) * w + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<S: Scalar>(grad_out: &Tensor5<S>) -> Tensor5<S> {
    let [n, c, od, oh, ow] = grad_out.shape();
    let (d, h, w) = (od / 2, oh / 2, ow / 2);
    let mut out = Tensor5::zeros([n, c, d, h, w]);
    for nc in 0..n * c {
        let src = &grad_out.data()[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        let dst = &mut out.data_mut()[nc * d * h * w..(nc + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    dst[((z / 2) * h + y / 2) * w + x / 2] += src[(z * oh + y) * ow + x];
                }
            }
        }
    }
    out
}
