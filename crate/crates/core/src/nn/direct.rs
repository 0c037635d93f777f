//! Direct 3x3x3 stride-1 "same" convolution for narrow layers.
//!
//! Works one output row at a time on a zero-padded copy of the input, so
//! there is no column matrix. Row loops are plain mul/add (no fused
//! multiply-add), which keeps results identical whichever instruction set
//! the dispatch picks.

use super::tensor::Scalar;

/// Zero-padded (one voxel per side) copy of `c` channels of extent `d`.
pub(crate) fn pad1<S: Scalar>(x: &[S], c: usize, d: [usize; 3]) -> Vec<S> {
    let p = [d[0] + 2, d[1] + 2, d[2] + 2];
    let mut out = vec![S::zero(); c * p[0] * p[1] * p[2]];
    for ch in 0..c {
        for z in 0..d[0] {
            for y in 0..d[1] {
                let src = ((ch * d[0] + z) * d[1] + y) * d[2];
                let dst = ((ch * p[0] + z + 1) * p[1] + y + 1) * p[2] + 1;
                out[dst..dst + d[2]].copy_from_slice(&x[src..src + d[2]]);
            }
        }
    }
    out
}

/// Weights of the adjoint convolution: channels swapped, kernel flipped.
pub(crate) fn adjoint_weight<S: Scalar>(w: &[S], c_out: usize, c_in: usize) -> Vec<S> {
    let mut t = vec![S::zero(); w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for k in 0..27 {
                t[(ci * c_out + co) * 27 + 26 - k] = w[(co * c_in + ci) * 27 + k];
            }
        }
    }
    t
}

/// Row lengths with a compile-time specialization; `R = 0` is the general case.
macro_rules! by_row {
    ($f:ident::<$s:ty>($row:expr; $($arg:expr),*)) => {
        match $row {
            16 => $f::<$s, 16>($($arg),*),
            24 => $f::<$s, 24>($($arg),*),
            32 => $f::<$s, 32>($($arg),*),
            48 => $f::<$s, 48>($($arg),*),
            64 => $f::<$s, 64>($($arg),*),
            96 => $f::<$s, 96>($($arg),*),
            _ => $f::<$s, 0>($($arg),*),
        }
    };
}

#[inline(always)]
fn row_len<const R: usize>(d: [usize; 3]) -> usize {
    if R == 0 {
        d[2]
    } else {
        R
    }
}

#[inline(always)]
fn forward_body<S: Scalar, const R: usize>(xp: &[S], c_in: usize, d: [usize; 3], w: &[S], bias: &[S], out: &mut [S]) {
    let c_out = bias.len();
    let (ph, pw) = (d[1] + 2, d[2] + 2);
    let pd = d[0] + 2;
    let row = row_len::<R>(d);
    let vox = d[0] * d[1] * d[2];
    let mut acc = vec![S::zero(); c_out * row];
    for z in 0..d[0] {
        for y in 0..d[1] {
            for co in 0..c_out {
                acc[co * row..(co + 1) * row].fill(bias[co]);
            }
            for ci in 0..c_in {
                for kz in 0..3 {
                    for ky in 0..3 {
                        let base = ((ci * pd + z + kz) * ph + y + ky) * pw;
                        let line = &xp[base..base + pw];
                        let (l0, l1, l2) = (&line[..row], &line[1..row + 1], &line[2..row + 2]);
                        let k = kz * 9 + ky * 3;
                        for co in 0..c_out {
                            let wi = (co * c_in + ci) * 27 + k;
                            let (w0, w1, w2) = (w[wi], w[wi + 1], w[wi + 2]);
                            let a = &mut acc[co * row..(co + 1) * row];
                            for (a, ((&x0, &x1), &x2)) in a.iter_mut().zip(l0.iter().zip(l1).zip(l2)) {
                                *a += w0 * x0 + w1 * x1 + w2 * x2;
                            }
                        }
                    }
                }
            }
            let o = (z * d[1] + y) * row;
            for co in 0..c_out {
                out[co * vox + o..co * vox + o + row].copy_from_slice(&acc[co * row..(co + 1) * row]);
            }
        }
    }
}

/// Accumulates `g[x] * in[x + k]` into one row-length accumulator per
/// (output, input, tap) triple and reduces each accumulator once at the end.
#[inline(always)]
fn grad_weight_body<S: Scalar, const R: usize>(xp: &[S], c_in: usize, d: [usize; 3], go: &[S], c_out: usize, gw: &mut [S]) {
    let (ph, pw) = (d[1] + 2, d[2] + 2);
    let pd = d[0] + 2;
    let row = row_len::<R>(d);
    let vox = d[0] * d[1] * d[2];
    let nk = c_in * 27;
    let mut acc = vec![S::zero(); c_out * nk * row];
    for z in 0..d[0] {
        for y in 0..d[1] {
            for ci in 0..c_in {
                for kz in 0..3 {
                    for ky in 0..3 {
                        let base = ((ci * pd + z + kz) * ph + y + ky) * pw;
                        let line = &xp[base..base + pw];
                        let (l0, l1, l2) = (&line[..row], &line[1..row + 1], &line[2..row + 2]);
                        let k = ci * 27 + kz * 9 + ky * 3;
                        for co in 0..c_out {
                            let o = co * vox + (z * d[1] + y) * row;
                            let g = &go[o..o + row];
                            let a = &mut acc[(co * nk + k) * row..(co * nk + k + 3) * row];
                            let (a0, rest) = a.split_at_mut(row);
                            let (a1, a2) = rest.split_at_mut(row);
                            for (((a0, a1), a2), (((&gv, &x0), &x1), &x2)) in a0
                                .iter_mut()
                                .zip(a1.iter_mut())
                                .zip(a2.iter_mut())
                                .zip(g.iter().zip(l0).zip(l1).zip(l2))
                            {
                                *a0 += gv * x0;
                                *a1 += gv * x1;
                                *a2 += gv * x2;
                            }
                        }
                    }
                }
            }
        }
    }
    for (i, w) in gw.iter_mut().enumerate() {
        *w += acc[i * row..(i + 1) * row].iter().copied().sum::<S>();
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn forward_avx2<S: Scalar>(xp: &[S], c_in: usize, d: [usize; 3], w: &[S], bias: &[S], out: &mut [S]) {
    by_row!(forward_body::<S>(d[2]; xp, c_in, d, w, bias, out))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn grad_weight_avx2<S: Scalar>(xp: &[S], c_in: usize, d: [usize; 3], go: &[S], c_out: usize, gw: &mut [S]) {
    by_row!(grad_weight_body::<S>(d[2]; xp, c_in, d, go, c_out, gw))
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// One sample: `xp` padded input (`pad1`), `w` as `(c_out, c_in, 3, 3, 3)`,
/// `out` is `c_out` channels of extent `d`.
pub(crate) fn forward<S: Scalar>(xp: &[S], c_in: usize, d: [usize; 3], w: &[S], bias: &[S], out: &mut [S]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at runtime.
        unsafe { forward_avx2(xp, c_in, d, w, bias, out) };
        return;
    }
    by_row!(forward_body::<S>(d[2]; xp, c_in, d, w, bias, out))
}

/// Accumulates the weight gradient of one sample into `gw`.
pub(crate) fn grad_weight<S: Scalar>(xp: &[S], c_in: usize, d: [usize; 3], go: &[S], c_out: usize, gw: &mut [S]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at runtime.
        unsafe { grad_weight_avx2(xp, c_in, d, go, c_out, gw) };
        return;
    }
    by_row!(grad_weight_body::<S>(d[2]; xp, c_in, d, go, c_out, gw))
}
