//! Exact Euclidean distance transform.
//!
//! Separable lower-envelope-of-parabolas algorithm (Felzenszwalb and
//! Huttenlocher): one exact 1D squared transform per axis. Squared distances
//! are sums of integer multiples of squared spacings, so with unit spacing
//! every output is an exact integer in f64.

use crate::error::{Error, Result};

/// Squared 1D transform of `f` in place: `d[p] = min_q f[q] + (w (p - q))^2`.
/// `f` may contain `f64::INFINITY` for "no site".
fn transform_line(f: &mut [f64], w2: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut [f64]) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let fr = f[r] + w2 * (r * r) as f64;
                    // abscissa where the parabolas rooted at r and q intersect
                    let s = (fq - fr) / (2.0 * w2 * (q as f64 - r as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let d = p as f64 - q as f64;
        *o = f[q] + w2 * d * d;
    }
}

/// Squared Euclidean distance (in units of `spacing`) from every voxel to the
/// nearest site. `sites` uses the x-fastest layout of `dims`.
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<Vec<f64>> {
    let [nx, ny, nz] = dims;
    if sites.len() != nx * ny * nz {
        return Err(Error::Shape(format!(
            "site buffer has {} entries, dims {dims:?}",
            sites.len()
        )));
    }
    if !sites.iter().any(|&s| s) {
        return Err(Error::Empty("distance transform needs at least one site".into()));
    }
    let mut d: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();

    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    let (mut v, mut z) = (Vec::with_capacity(max_n), Vec::with_capacity(max_n));

    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let w2 = spacing[axis] * spacing[axis];
        // iterate over all lines parallel to `axis`
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let base = a * strides[oa] + b * strides[ob];
                for i in 0..n {
                    line[i] = d[base + i * stride];
                }
                transform_line(&mut line[..n], w2, &mut v, &mut z, &mut out[..n]);
                for i in 0..n {
                    d[base + i * stride] = out[i];
                }
            }
        }
    }
    Ok(d)
}

/// Distance in voxel units from every voxel to the nearest voxel of
/// `component`.
pub fn distance_transform(component: &[[usize; 3]], dims: [usize; 3]) -> Result<Vec<f64>> {
    if component.is_empty() {
        return Err(Error::Empty("distance transform of an empty component".into()));
    }
    let mut sites = vec![false; dims[0] * dims[1] * dims[2]];
    for &[x, y, z] in component {
        if x >= dims[0] || y >= dims[1] || z >= dims[2] {
            return Err(Error::InvalidArgument(format!(
                "component voxel ({x},{y},{z}) outside dims {dims:?}"
            )));
        }
        sites[(z * dims[1] + y) * dims[0] + x] = true;
    }
    let mut d = squared_distance_transform(&sites, dims, [1.0; 3])?;
    d.iter_mut().for_each(|v| *v = v.sqrt());
    Ok(d)
}
