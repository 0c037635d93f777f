//! Resampling, cropping and intensity windowing that bring a CT and its masks
//! onto the fixed network grid.

use crate::error::{Error, Result};
use crate::volume::{Geometry, Mask3, Volume3};

/// Air, used to pad CT volumes beyond the scanned field.
pub const PAD_HU: f32 = -1000.0;

/// Soft-tissue window mapped onto [0, 1].
pub const DEFAULT_HU_WINDOW: (f32, f32) = (-200.0, 200.0);

fn resampled_geometry(g: &Geometry, target: [f64; 3]) -> Result<Geometry> {
    if target.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be finite and > 0, got {target:?}"
        )));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = ((g.dims[a] as f64 * g.spacing[a] / target[a]).round() as usize).max(1);
    }
    Geometry::new(dims, target, g.origin)
}

/// Continuous input coordinate of output voxel `i` along axis `a`.
#[inline]
fn source_coord(src: &Geometry, dst: &Geometry, a: usize, i: usize) -> f64 {
    let c = i as f64 * dst.spacing[a] / src.spacing[a];
    c.clamp(0.0, (src.dims[a] - 1) as f64)
}

/// Trilinear resampling onto `target_spacing`, keeping the origin. Samples
/// beyond the last voxel center take the edge value.
pub fn resample_trilinear(v: &Volume3, target_spacing: [f64; 3]) -> Result<Volume3> {
    let src = *v.geometry();
    let dst = resampled_geometry(&src, target_spacing)?;
    if dst == src {
        return Ok(v.clone());
    }
    // Per-axis (lower index, upper index, weight of upper) tables.
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..dst.dims[a])
            .map(|i| {
                let c = source_coord(&src, &dst, a, i);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(src.dims[a] - 1);
                (lo, hi, c - lo as f64)
            })
            .collect()
    };
    let (tx, ty, tz) = (axis(0), axis(1), axis(2));
    let data = v.data();
    let at = |x: usize, y: usize, z: usize| data[src.index(x, y, z)] as f64;
    Volume3::from_fn(dst, |x, y, z| {
        let (x0, x1, fx) = tx[x];
        let (y0, y1, fy) = ty[y];
        let (z0, z1, fz) = tz[z];
        let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
        let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
        let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
        let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        (c0 * (1.0 - fz) + c1 * fz) as f32
    })
}

/// Nearest-neighbour resampling for label masks.
pub fn resample_mask_nearest(m: &Mask3, target_spacing: [f64; 3]) -> Result<Mask3> {
    let src = *m.geometry();
    let dst = resampled_geometry(&src, target_spacing)?;
    if dst == src {
        return Ok(m.clone());
    }
    let axis = |a: usize| -> Vec<usize> {
        (0..dst.dims[a])
            .map(|i| (source_coord(&src, &dst, a, i).round() as usize).min(src.dims[a] - 1))
            .collect()
    };
    let (tx, ty, tz) = (axis(0), axis(1), axis(2));
    Mask3::from_fn(dst, |x, y, z| m.get(tx[x], ty[y], tz[z]))
}

fn window_geometry(g: &Geometry, center: [usize; 3], out_dims: [usize; 3]) -> Result<(Geometry, [i64; 3])> {
    if (0..3).any(|a| center[a] >= g.dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "crop center {center:?} outside dims {:?}",
            g.dims
        )));
    }
    let mut start = [0i64; 3];
    for a in 0..3 {
        start[a] = center[a] as i64 - (out_dims[a] / 2) as i64;
    }
    let origin = g.world([start[0] as f64, start[1] as f64, start[2] as f64]);
    Ok((Geometry::new(out_dims, g.spacing, origin)?, start))
}

fn crop_with<T: Copy>(
    src: &Geometry,
    data: &[T],
    dst: &Geometry,
    start: [i64; 3],
    pad: T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(dst.len());
    for z in 0..dst.dims[2] {
        for y in 0..dst.dims[1] {
            for x in 0..dst.dims[0] {
                let p = [start[0] + x as i64, start[1] + y as i64, start[2] + z as i64];
                out.push(if src.contains(p) {
                    data[src.index(p[0] as usize, p[1] as usize, p[2] as usize)]
                } else {
                    pad
                });
            }
        }
    }
    out
}

/// Window of `out_dims` voxels centered on `center` (the center lands at
/// index `out_dims / 2`). Voxels outside the input are air. The origin is
/// shifted so retained voxels keep their world coordinates.
pub fn crop_or_pad_volume(v: &Volume3, center: [usize; 3], out_dims: [usize; 3]) -> Result<Volume3> {
    let (dst, start) = window_geometry(v.geometry(), center, out_dims)?;
    Volume3::new(dst, crop_with(v.geometry(), v.data(), &dst, start, PAD_HU))
}

/// Mask counterpart of [`crop_or_pad_volume`]; padding is background.
pub fn crop_or_pad_mask(m: &Mask3, center: [usize; 3], out_dims: [usize; 3]) -> Result<Mask3> {
    let (dst, start) = window_geometry(m.geometry(), center, out_dims)?;
    Mask3::new(dst, crop_with(m.geometry(), m.data(), &dst, start, 0u8))
}

/// Linear map of `[lo, hi]` HU onto [0, 1], clamped outside the window.
pub fn normalize_hu(v: &Volume3, window: (f32, f32)) -> Result<Volume3> {
    let (lo, hi) = window;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "HU window needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    let scale = 1.0 / (hi as f64 - lo as f64);
    v.map(|x| ((x as f64 - lo as f64) * scale).clamp(0.0, 1.0) as f32)
}

/// The voxel nearest the foreground centroid of `mask`.
pub fn compute_crop_center(mask: &Mask3) -> Result<[usize; 3]> {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0 {
            let c = mask.geometry().coords(i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("crop center of an empty mask".into()));
    }
    let dims = mask.dims();
    Ok([0, 1, 2].map(|a| ((sum[a] / n as f64).round() as usize).min(dims[a] - 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(dims: [usize; 3], s: f64) -> Geometry {
        Geometry::new(dims, [s; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn identity_resample() {
        let g = geom([4, 5, 6], 2.0);
        let v = Volume3::from_fn(g, |x, y, z| (x * 7 + y * 3 + z) as f32 * 0.5).unwrap();
        assert_eq!(resample_trilinear(&v, [2.0; 3]).unwrap(), v);
        let m = Mask3::from_fn(g, |x, y, _| (x + y) % 2 == 0).unwrap();
        assert_eq!(resample_mask_nearest(&m, [2.0; 3]).unwrap(), m);
    }

    #[test]
    fn ramp_resample_matches_closed_form() {
        let g = Geometry::new([10, 1, 1], [1.0; 3], [3.0, 0.0, 0.0]).unwrap();
        let v = Volume3::from_fn(g, |x, _, _| x as f32).unwrap();
        let r = resample_trilinear(&v, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [5, 1, 1]);
        assert_eq!(r.geometry().origin, [3.0, 0.0, 0.0]);
        for i in 0..5 {
            assert_eq!(r.get(i, 0, 0), (2 * i) as f32);
        }
        // non-integer sample positions
        let r = resample_trilinear(&v, [1.5, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [7, 1, 1]);
        for i in 0..7 {
            assert!((r.get(i, 0, 0) - 1.5 * i as f32).abs() < 1e-6);
        }
        // upsampling past the last center clamps to the edge value
        let r = resample_trilinear(&v, [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [20, 1, 1]);
        assert_eq!(r.get(19, 0, 0), 9.0);
        assert_eq!(r.get(3, 0, 0), 1.5);
    }

    #[test]
    fn single_voxel_mask_upsamples_to_block() {
        let g = geom([5, 5, 5], 1.0);
        let m = Mask3::from_voxels(g, &[[2, 2, 2]]).unwrap();
        let r = resample_mask_nearest(&m, [0.5; 3]).unwrap();
        assert_eq!(r.dims(), [10, 10, 10]);
        // oracle: output voxel i sits at 0.5*i mm; nearest input center is round(0.5*i)
        let expect = Mask3::from_fn(*r.geometry(), |x, y, z| {
            [x, y, z].iter().all(|&i| (0.5 * i as f64).round() as usize == 2)
        })
        .unwrap();
        assert_eq!(r, expect);
        assert_eq!(r.count(), 8);
        assert!(r.get(3, 3, 3) && r.get(4, 4, 4));
    }

    #[test]
    fn crop_identity_and_pad_shell() {
        let g = geom([96, 96, 96], 2.0);
        let v = Volume3::from_fn(g, |x, y, z| (x + y + z) as f32).unwrap();
        assert_eq!(crop_or_pad_volume(&v, [48, 48, 48], [96; 3]).unwrap(), v);

        let g = geom([50, 50, 50], 2.0);
        let v = Volume3::from_fn(g, |x, y, z| (x + 50 * y + 2500 * z) as f32).unwrap();
        let c = crop_or_pad_volume(&v, [25, 25, 25], [96; 3]).unwrap();
        assert_eq!(c.dims(), [96; 3]);
        // index-map oracle: output j <- input j - 23
        let mut pad = 0;
        for z in 0..96 {
            for y in 0..96 {
                for x in 0..96 {
                    let src = [x as i64 - 23, y as i64 - 23, z as i64 - 23];
                    if g.contains(src) {
                        assert_eq!(c.get(x, y, z), v.get(src[0] as usize, src[1] as usize, src[2] as usize));
                    } else {
                        assert_eq!(c.get(x, y, z), PAD_HU);
                        pad += 1;
                    }
                }
            }
        }
        assert_eq!(pad, 96 * 96 * 96 - 50 * 50 * 50);
        // retained voxels keep their world coordinates
        let w_in = v.geometry().world([0.0, 0.0, 0.0]);
        let w_out = c.geometry().world([23.0, 23.0, 23.0]);
        assert_eq!(w_in, w_out);

        let m = Mask3::ones(g).unwrap();
        let cm = crop_or_pad_mask(&m, [25, 25, 25], [96; 3]).unwrap();
        assert_eq!(cm.count(), 50 * 50 * 50);
    }

    #[test]
    fn corner_center_is_mostly_pad() {
        let g = geom([40, 40, 40], 2.0);
        let v = Volume3::filled(g, 0.0).unwrap();
        let c = crop_or_pad_volume(&v, [0, 0, 0], [32; 3]).unwrap();
        let pad = c.data().iter().filter(|&&x| x == PAD_HU).count();
        assert!(pad * 8 >= 7 * 32 * 32 * 32);
        assert_eq!(pad, 32 * 32 * 32 - 16 * 16 * 16);
        assert!(crop_or_pad_volume(&v, [40, 0, 0], [4; 3]).is_err());
    }

    #[test]
    fn hu_window() {
        let g = geom([5, 1, 1], 1.0);
        let v = Volume3::new(g, vec![-200.0, 200.0, 0.0, 1200.0, -1000.0]).unwrap();
        let n = normalize_hu(&v, DEFAULT_HU_WINDOW).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5, 1.0, 0.0]);
        assert!(normalize_hu(&v, (10.0, 10.0)).is_err());
    }

    #[test]
    fn crop_centers() {
        let g = geom([40, 40, 40], 1.0);
        let m = Mask3::from_voxels(g, &[[10, 20, 30]]).unwrap();
        assert_eq!(compute_crop_center(&m).unwrap(), [10, 20, 30]);
        let m = Mask3::from_fn(g, |x, y, z| [x, y, z].iter().all(|&c| (4..=6).contains(&c))).unwrap();
        assert_eq!(compute_crop_center(&m).unwrap(), [5, 5, 5]);
        let m = Mask3::from_voxels(g, &[[0, 0, 0], [4, 0, 0]]).unwrap();
        assert_eq!(compute_crop_center(&m).unwrap(), [2, 0, 0]);
        assert!(matches!(compute_crop_center(&Mask3::zeros(g).unwrap()), Err(Error::Empty(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn constant_field_survives_resampling(
            dims in prop::array::uniform3(1usize..7),
            spacing in prop::array::uniform3(0.5f64..3.0),
            target in prop::array::uniform3(0.5f64..3.0),
        ) {
            let g = Geometry::new(dims, spacing, [0.0; 3]).unwrap();
            let v = Volume3::filled(g, 7.0).unwrap();
            let r = resample_trilinear(&v, target).unwrap();
            prop_assert!(r.data().iter().all(|&x| x == 7.0));
            let m = Mask3::ones(g).unwrap();
            let rm = resample_mask_nearest(&m, target).unwrap();
            prop_assert!(rm.data().iter().all(|&x| x == 1));
        }

        #[test]
        fn normalize_is_bounded_and_monotone(a in -5000f32..5000.0, b in -5000f32..5000.0) {
            let g = geom([2, 1, 1], 1.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v = Volume3::new(g, vec![lo, hi]).unwrap();
            let n = normalize_hu(&v, DEFAULT_HU_WINDOW).unwrap();
            prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!(n.data()[0] <= n.data()[1]);
        }

        #[test]
        fn crop_is_idempotent(
            dims in prop::array::uniform3(1usize..12),
            out in prop::array::uniform3(1usize..10),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = geom(dims, 2.0);
            let v = Volume3::from_fn(g, |_, _, _| rng.gen_range(-100.0f32..100.0)).unwrap();
            let m = Mask3::from_fn(g, |_, _, _| rng.gen_bool(0.4)).unwrap();
            let center = [0, 1, 2].map(|a| rng.gen_range(0..dims[a]));
            let once = crop_or_pad_volume(&v, center, out).unwrap();
            let twice = crop_or_pad_volume(&once, [out[0] / 2, out[1] / 2, out[2] / 2], out).unwrap();
            prop_assert_eq!(&once, &twice);
            let mo = crop_or_pad_mask(&m, center, out).unwrap();
            let mt = crop_or_pad_mask(&mo, [out[0] / 2, out[1] / 2, out[2] / 2], out).unwrap();
            prop_assert_eq!(mo, mt);
        }
    }
}
