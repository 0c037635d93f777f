//! Marker-driven saliency maps.
//!
//! Markers are found by HU thresholding, restricted to the breast, cleaned
//! with a closing and an opening, and split into 26-connected location cues.
//! Every cue contributes a Gaussian of its Euclidean distance map,
//! `exp(-d^2 / sigma^2)`; the per-cue maps are summed and divided by the
//! global maximum of the sum, so the result lies in [0, 1] and peaks at
//! exactly 1.

pub mod edt;
pub mod morphology;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{self, Mask3, Volume3};

pub use edt::{distance_transform, squared_distance_transform};
pub use morphology::{connected_components, morph_refine, CueComponents, StructuringElement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyParams {
    pub threshold_lo_hu: f32,
    pub threshold_hi_hu: f32,
    /// Gaussian width in voxels of the grid the map is computed on.
    pub sigma: f64,
    pub structuring_element: StructuringElement,
    pub connectivity: u8,
}

impl Default for SaliencyParams {
    fn default() -> Self {
        SaliencyParams {
            threshold_lo_hu: 400.0,
            threshold_hi_hu: 2500.0,
            sigma: 1.0,
            structuring_element: StructuringElement::Cross6,
            connectivity: 26,
        }
    }
}

/// Saliency values in [0, 1] on the CT grid plus the number of cues used.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub map: Volume3,
    pub cue_count: usize,
}

impl SaliencyMap {
    /// All-zero map for images without usable cues.
    pub fn empty(geom: volume::Geometry) -> Result<Self> {
        Ok(SaliencyMap {
            map: Volume3::filled(geom, 0.0)?,
            cue_count: 0,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.cue_count == 0
    }
}

/// 1 where `lo <= hu <= hi`.
pub fn threshold_markers(ct: &Volume3, lo: f32, hi: f32) -> Mask3 {
    let data = ct.data().iter().map(|&v| (lo <= v && v <= hi) as u8).collect();
    Mask3::new(*ct.geometry(), data).expect("threshold output is binary")
}

/// Keeps marker voxels inside the breast.
pub fn filter_by_breast(markers: &Mask3, breast: &Mask3) -> Result<Mask3> {
    markers.and(breast)
}

/// Gaussian of a distance map: `exp(-d^2 / sigma^2)`.
pub fn dgf(dist: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let s2 = sigma * sigma;
    Ok(dist.iter().map(|d| (-(d * d) / s2).exp()).collect())
}

/// Voxel-wise sum of the per-cue maps divided by its global maximum.
pub fn combine_dgfs(maps: &[Vec<f64>], geom: volume::Geometry) -> Result<SaliencyMap> {
    if maps.is_empty() {
        log::warn!("no location cues; saliency map is all zero");
        return SaliencyMap::empty(geom);
    }
    let sum = sum_dgfs(maps, geom.len())?;
    let peak = sum.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Numeric("saliency sum has no positive value".into()));
    }
    let map = Volume3::new(geom, sum.iter().map(|v| (v / peak) as f32).collect())?;
    Ok(SaliencyMap {
        map,
        cue_count: maps.len(),
    })
}

/// Un-normalized voxel-wise sum of per-cue maps. Each voxel's terms are
/// added in ascending order, so the result does not depend on cue order.
pub fn sum_dgfs(maps: &[Vec<f64>], len: usize) -> Result<Vec<f64>> {
    if let Some(m) = maps.iter().find(|m| m.len() != len) {
        return Err(Error::Shape(format!("cue map has {} voxels, expected {len}", m.len())));
    }
    let mut terms = Vec::with_capacity(maps.len());
    Ok((0..len)
        .map(|i| {
            terms.clear();
            terms.extend(maps.iter().map(|m| m[i]));
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect())
}

/// The refined, breast-restricted marker mask and its cue components.
pub fn extract_cues(ct_hu: &Volume3, breast: &Mask3, params: &SaliencyParams) -> Result<CueComponents> {
    ct_hu.geometry().ensure_same(breast.geometry(), "saliency ct/breast")?;
    let markers = threshold_markers(ct_hu, params.threshold_lo_hu, params.threshold_hi_hu);
    let inside = filter_by_breast(&markers, breast)?;
    let refined = morph_refine(&inside, params.structuring_element);
    Ok(connected_components(&refined, params.connectivity))
}

/// Saliency from an explicit list of cue components.
pub fn saliency_from_components(
    components: &[&[[usize; 3]]],
    geom: volume::Geometry,
    sigma: f64,
) -> Result<SaliencyMap> {
    let maps = components
        .iter()
        .map(|c| distance_transform(c, geom.dims).and_then(|d| dgf(&d, sigma)))
        .collect::<Result<Vec<_>>>()?;
    combine_dgfs(&maps, geom)
}

/// Full saliency generation from a CT in HU and its breast mask.
pub fn generate_saliency(ct_hu: &Volume3, breast: &Mask3, params: &SaliencyParams) -> Result<SaliencyMap> {
    generate_saliency_limited(ct_hu, breast, params, None)
}

/// Like [`generate_saliency`] but keeps only the first `max_cues` cues in
/// size order (largest first, ties by scan order).
pub fn generate_saliency_limited(
    ct_hu: &Volume3,
    breast: &Mask3,
    params: &SaliencyParams,
    max_cues: Option<usize>,
) -> Result<SaliencyMap> {
    let cues = extract_cues(ct_hu, breast, params)?;
    let order = cues.order_by_size();
    let keep = max_cues.unwrap_or(order.len()).min(order.len());
    let chosen: Vec<&[[usize; 3]]> = order[..keep].iter().map(|&i| cues.components[i].as_slice()).collect();
    saliency_from_components(&chosen, *ct_hu.geometry(), params.sigma)
}

pub fn write_saliency(s: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("cue_count".to_string(), serde_json::json!(s.cue_count));
    volume::write_volume_with_metadata(&s.map, path, meta)
}

pub fn read_saliency(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let (map, header) = volume::read_volume_with_header(path)?;
    let cue_count = header
        .metadata
        .get("cue_count")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("saliency header lacks cue_count".into()))? as usize;
    if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format("saliency values outside [0, 1]".into()));
    }
    Ok(SaliencyMap { map, cue_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn geom(n: usize) -> Geometry {
        Geometry::unit([n, n, n]).unwrap()
    }

    fn stamp_cross(ct: &mut [f32], g: &Geometry, c: [usize; 3], hu: f32) {
        ct[g.index(c[0], c[1], c[2])] = hu;
        for o in morphology::neighbor_offsets(6) {
            ct[g.index(
                (c[0] as i64 + o[0]) as usize,
                (c[1] as i64 + o[1]) as usize,
                (c[2] as i64 + o[2]) as usize,
            )] = hu;
        }
    }

    #[test]
    fn threshold_bounds_are_inclusive() {
        let g = Geometry::unit([6, 1, 1]).unwrap();
        let ct = Volume3::new(g, vec![1000.0, 300.0, 400.0, 399.9, 2500.0, 2500.1]).unwrap();
        assert_eq!(threshold_markers(&ct, 400.0, 2500.0).data(), &[1, 0, 1, 0, 1, 0]);
        let air = Volume3::filled(geom(3), -1000.0).unwrap();
        assert!(threshold_markers(&air, 400.0, 2500.0).is_empty_mask());
    }

    #[test]
    fn breast_filter() {
        let g = geom(6);
        let m = Mask3::from_voxels(g, &[[1, 1, 1], [4, 4, 4]]).unwrap();
        assert_eq!(filter_by_breast(&m, &Mask3::ones(g).unwrap()).unwrap(), m);
        assert!(filter_by_breast(&m, &Mask3::zeros(g).unwrap()).unwrap().is_empty_mask());
        // rib outside the breast, clip inside
        let breast = Mask3::from_fn(g, |x, _, _| x >= 3).unwrap();
        let out = filter_by_breast(&m, &breast).unwrap();
        assert_eq!(out.foreground(), vec![[4, 4, 4]]);
    }

    #[test]
    fn dgf_values() {
        let v = dgf(&[0.0, 1.0, 3.0], 1.0).unwrap();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v[2] - 1.2340980408667956e-4).abs() < 1e-16);
        assert!(v[0] > v[1] && v[1] > v[2]);
        assert!(dgf(&[0.0], 0.0).is_err());
        assert!(dgf(&[0.0], -1.0).is_err());
    }

    #[test]
    fn combine_identities() {
        let g = Geometry::unit([4, 1, 1]).unwrap();
        let one = dgf(&[0.0, 1.0, 2.0, 3.0], 1.0).unwrap();
        let s = combine_dgfs(&[one.clone()], g).unwrap();
        assert_eq!(s.cue_count, 1);
        for (a, b) in s.map.data().iter().zip(&one) {
            assert_eq!(*a, *b as f32);
        }
        let s2 = combine_dgfs(&[one.clone(), one.clone()], g).unwrap();
        assert_eq!(s2.map, s.map);
        let empty = combine_dgfs(&[], g).unwrap();
        assert!(empty.is_degenerate() && empty.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cue_order_does_not_matter() {
        let g = Geometry::unit([9, 7, 5]).unwrap();
        let maps: Vec<Vec<f64>> = [[0, 0, 0], [8, 6, 4], [4, 3, 2], [1, 5, 3]]
            .iter()
            .map(|&c| dgf(&distance_transform(&[c], g.dims).unwrap(), 1.7).unwrap())
            .collect();
        let base = combine_dgfs(&maps, g).unwrap();
        for rot in 1..maps.len() {
            let mut m = maps.clone();
            m.rotate_left(rot);
            m.swap(0, 1);
            assert_eq!(combine_dgfs(&m, g).unwrap(), base);
        }
    }

    #[test]
    fn distant_cues_peak_at_one() {
        let g = Geometry::unit([20, 1, 1]).unwrap();
        let a = dgf(&distance_transform(&[[2, 0, 0]], g.dims).unwrap(), 1.0).unwrap();
        let b = dgf(&distance_transform(&[[16, 0, 0]], g.dims).unwrap(), 1.0).unwrap();
        let s = combine_dgfs(&[a, b], g).unwrap();
        assert!((s.map.get(2, 0, 0) - 1.0).abs() < 1e-6);
        assert!((s.map.get(16, 0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn generate_from_markers() {
        let g = geom(24);
        let mut ct = vec![0.0f32; g.len()];
        let centers = [[5, 5, 5], [18, 6, 6], [6, 18, 12], [17, 17, 18], [12, 12, 3]];
        for c in centers {
            stamp_cross(&mut ct, &g, c, 1200.0);
        }
        let ct = Volume3::new(g, ct).unwrap();
        let breast = Mask3::ones(g).unwrap();
        let s = generate_saliency(&ct, &breast, &SaliencyParams::default()).unwrap();
        assert_eq!(s.cue_count, 5);
        assert_eq!(s.map.max(), 1.0);
        for c in centers {
            assert!((s.map.get(c[0], c[1], c[2]) - 1.0).abs() < 1e-6);
        }
        // markers outside the breast vanish
        let none = generate_saliency(&ct, &Mask3::zeros(g).unwrap(), &SaliencyParams::default()).unwrap();
        assert_eq!(none.cue_count, 0);
        assert!(none.map.data().iter().all(|&v| v == 0.0));
        // keeping one cue gives exactly that cue's DGF
        let one = generate_saliency_limited(&ct, &breast, &SaliencyParams::default(), Some(1)).unwrap();
        let cues = extract_cues(&ct, &breast, &SaliencyParams::default()).unwrap();
        let first = cues.order_by_size()[0];
        let d = dgf(&distance_transform(&cues.components[first], g.dims).unwrap(), 1.0).unwrap();
        assert!(one.map.data().iter().zip(&d).all(|(a, b)| *a == *b as f32));
    }

    #[test]
    fn saliency_file_round_trip() {
        let g = geom(5);
        let s = saliency_from_components(&[&[[1, 1, 1]][..], &[[3, 3, 3]][..]], g, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sal");
        write_saliency(&s, &p).unwrap();
        assert_eq!(read_saliency(&p).unwrap(), s);
    }
}
