use super::tensor::{Scalar, Tensor5};
use crate::error::{Error, Result};

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index it was taken from. Ties go to the
/// first voxel of the block in (z, y, x) scan order.
pub fn maxpool3d<S: Scalar>(input: &Tensor5<S>) -> Result<(Tensor5<S>, Vec<u32>)> {
    let [n, c, d, h, w] = input.shape();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial dims, got {:?}",
            [d, h, w]
        )));
    }
    if input.len() > u32::MAX as usize {
        return Err(Error::Shape("tensor too large for pooling indices".into()));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor5::zeros([n, c, od, oh, ow]);
    let mut arg = vec![0u32; out.len()];
    let x = input.data();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xo;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.data_mut()[o] = x[best];
                    arg[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Routes each output gradient to the input element that won the max.
pub fn maxpool3d_backward<S: Scalar>(grad_out: &Tensor5<S>, argmax: &[u32], input_shape: [usize; 5]) -> Tensor5<S> {
    let mut g = Tensor5::zeros(input_shape);
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[i as usize] += v;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_max() {
        let x = Tensor5::from_vec([1, 1, 2, 2, 2], (1..=8).map(|v| v as f32).collect()).unwrap();
        let (y, arg) = maxpool3d(&x).unwrap();
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(arg, vec![7]);
    }

    #[test]
    fn constant_input_routes_to_first_voxel() {
        let x = Tensor5::full([1, 2, 4, 2, 2], 3.0f64);
        let (y, arg) = maxpool3d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let g = maxpool3d_backward(&Tensor5::full(y.shape(), 1.0), &arg, x.shape());
        // one winner per block: the (0,0,0) corner of each 2x2x2 block
        assert_eq!(g.data().iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[8], 1.0);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(maxpool3d(&Tensor5::<f32>::zeros([1, 1, 3, 2, 2])).is_err());
    }
}
