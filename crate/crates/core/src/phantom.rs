//! Synthetic breast CT phantoms: an ellipsoidal breast of noisy soft tissue,
//! a low-contrast ellipsoidal tumor bed (TBV), high-HU markers on the TBV
//! surface, unlabeled TBV look-alikes ("mimics") ringed by decoys, and
//! scattered decoy calcifications. Decoys stay below the marker threshold.
//!
//! After windowing to [-200, 200] HU decoys and markers look the same, so
//! only the raw HU values (and therefore the saliency channel) tell the TBV
//! from a mimic.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{self, Geometry, Mask3, Volume3};

pub const AIR_HU: f32 = -1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    /// `sum((p - c)^2 / a^2)`; at most 1 inside.
    pub fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| {
                let d = (p[k] - self.center_mm[k]) / self.semi_axes_mm[k];
                d * d
            })
            .sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * PI * self.semi_axes_mm.iter().product::<f64>()
    }

    /// Point on the surface along unit direction `u`.
    pub fn surface_point(&self, u: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.center_mm[k] + self.semi_axes_mm[k] * u[k])
    }

    fn inside_with_margin(&self, outer: &Ellipsoid, margin_mm: f64) -> bool {
        // the inner ellipsoid grown by the margin, sampled on a Fibonacci sphere
        let grown = Ellipsoid {
            semi_axes_mm: self.semi_axes_mm.map(|a| a + margin_mm),
            ..*self
        };
        let n = 256;
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..n).all(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            outer.level(grown.surface_point([r * t.cos(), r * t.sin(), z])) < 1.0
        })
    }
}

/// A fully specified phantom image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub breast: Ellipsoid,
    pub tbv: Ellipsoid,
    /// Ellipsoids with the TBV's contrast that are not part of the label.
    pub mimics: Vec<Ellipsoid>,
    pub tissue_hu: f32,
    pub tissue_noise_hu: f32,
    pub tbv_offset_hu: f32,
    /// Unit directions from the TBV center to each marker.
    pub marker_directions: Vec<[f64; 3]>,
    pub marker_hu: f32,
    pub marker_radius_vox: f64,
    /// Decoy centers (mm) and HU values.
    pub decoys: Vec<([f64; 3], f32)>,
    pub decoy_radius_vox: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing_mm, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.breast.semi_axes_mm.iter().chain(&self.tbv.semi_axes_mm).any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad("ellipsoid semi-axes must be positive".into());
        }
        if !self.tbv.inside_with_margin(&self.breast, 0.0) || self.mimics.iter().any(|m| !m.inside_with_margin(&self.breast, 0.0)) {
            return bad("tbv and mimic ellipsoids must lie strictly inside the breast".into());
        }
        if !(400.0..=2500.0).contains(&self.marker_hu) {
            return bad(format!("marker HU {} outside the detectable range [400, 2500]", self.marker_hu));
        }
        if self.decoys.iter().any(|d| d.1 >= 400.0) {
            return bad("decoys must stay below 400 HU".into());
        }
        if !(self.tissue_noise_hu >= 0.0) || self.tissue_hu + self.tbv_offset_hu.max(0.0) + 6.0 * self.tissue_noise_hu >= 400.0 {
            return bad("tissue intensities must stay well below the marker threshold".into());
        }
        if self.marker_radius_vox < 0.0 || self.decoy_radius_vox < 0.0 {
            return bad("radii must be non-negative".into());
        }
        for u in &self.marker_directions {
            let n: f64 = u.iter().map(|v| v * v).sum();
            if (n - 1.0).abs() > 1e-9 {
                return bad(format!("marker direction {u:?} is not a unit vector"));
            }
        }
        Ok(())
    }

    pub fn marker_centers_mm(&self) -> Vec<[f64; 3]> {
        self.marker_directions.iter().map(|&u| self.tbv.surface_point(u)).collect()
    }
}

/// Ground truth and image of one phantom.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub ct: Volume3,
    pub breast: Mask3,
    pub tbv: Mask3,
    /// Marker centers in voxel coordinates (rounded).
    pub markers: Vec<[usize; 3]>,
}

fn ball(g: &Geometry, center_mm: [f64; 3], radius_vox: f64) -> Vec<[usize; 3]> {
    let c = g.voxel(center_mm).map(|v| v.round() as i64);
    let r = radius_vox.floor() as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy + dz * dz) as f64) > radius_vox * radius_vox {
                    continue;
                }
                let p = [c[0] + dx, c[1] + dy, c[2] + dz];
                if g.contains(p) {
                    out.push([p[0] as usize, p[1] as usize, p[2] as usize]);
                }
            }
        }
    }
    out
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let g = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, spec.tissue_noise_hu).map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let n = g.len();
    let (mut ct, mut breast, mut tbv) = (vec![AIR_HU; n], vec![0u8; n], vec![0u8; n]);
    for i in 0..n {
        let c = g.coords(i);
        let p = g.world([c[0] as f64, c[1] as f64, c[2] as f64]);
        if !spec.breast.contains(p) {
            continue;
        }
        breast[i] = 1;
        let mut hu = spec.tissue_hu + noise.sample(&mut rng);
        if spec.tbv.contains(p) {
            tbv[i] = 1;
            hu += spec.tbv_offset_hu;
        } else if spec.mimics.iter().any(|m| m.contains(p)) {
            hu += spec.tbv_offset_hu;
        }
        ct[i] = hu;
    }
    let mut stamp = |center: [f64; 3], r: f64, hu: f32| -> Result<[usize; 3]> {
        let vox = ball(&g, center, r);
        for &[x, y, z] in &vox {
            let i = g.index(x, y, z);
            if breast[i] == 0 {
                return Err(Error::InvalidArgument(format!("object at {center:?} mm leaves the breast")));
            }
            ct[i] = hu;
        }
        let c = g.voxel(center).map(|v| v.round().max(0.0) as usize);
        Ok(c)
    };
    for &(c, hu) in &spec.decoys {
        stamp(c, spec.decoy_radius_vox, hu)?;
    }
    let markers = spec
        .marker_centers_mm()
        .into_iter()
        .map(|c| stamp(c, spec.marker_radius_vox, spec.marker_hu))
        .collect::<Result<Vec<_>>>()?;
    Ok(Phantom {
        ct: Volume3::new(g, ct)?,
        breast: Mask3::new(g, breast)?,
        tbv: Mask3::new(g, tbv)?,
        markers,
    })
}

/// Ranges from which per-patient geometry and per-fraction variation are
/// drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub breast_semi_axis_mm: (f64, f64),
    /// Largest breast-center offset from the grid center, per axis.
    pub breast_offset_mm: f64,
    pub tbv_semi_axis_mm: (f64, f64),
    /// Half-width of the cube around the breast center that must contain
    /// the TBV, the mimics and their surface objects.
    pub roi_half_width_mm: f64,
    pub tissue_hu: f32,
    pub tissue_noise_hu: f32,
    pub tbv_offset_hu: f32,
    pub markers: (usize, usize),
    pub marker_hu: f32,
    pub marker_radius_vox: f64,
    /// Minimum marker (and decoy) spacing in voxels.
    pub min_separation_vox: f64,
    /// TBV-like soft-tissue ellipsoids with the same contrast, sizes and
    /// number of surface objects, but with sub-threshold decoys instead of
    /// markers.
    pub mimics: usize,
    /// Scattered decoys elsewhere in the breast.
    pub decoys: (usize, usize),
    pub decoy_hu: (f32, f32),
    /// Gap in mm kept between the TBV, the mimics and scattered decoys.
    pub clearance_mm: f64,
    /// Target per-patient CV (percent) of the fraction TBV volumes.
    pub volume_cv_percent: (f64, f64),
    /// Standard deviation (mm) of the per-fraction rigid shift.
    pub jitter_mm: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            dims: [64; 3],
            spacing_mm: 2.0,
            breast_semi_axis_mm: (40.0, 50.0),
            breast_offset_mm: 6.0,
            tbv_semi_axis_mm: (8.0, 12.0),
            roi_half_width_mm: 31.0,
            tissue_hu: -50.0,
            tissue_noise_hu: 15.0,
            tbv_offset_hu: 40.0,
            markers: (4, 6),
            marker_hu: 1200.0,
            marker_radius_vox: 1.0,
            min_separation_vox: 4.0,
            mimics: 1,
            decoys: (2, 4),
            decoy_hu: (250.0, 350.0),
            clearance_mm: 2.0,
            volume_cv_percent: (7.0, 13.0),
            jitter_mm: 2.0,
        }
    }
}

/// Independent random stream for a patient (`fraction = None`) or one of its
/// fractions.
pub fn stream(seed: u64, patient: usize, fraction: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((patient as u64) << 16) | fraction.map_or(0, |f| f as u64 + 1));
    rng
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

/// Patient-level geometry shared by all fractions. Surface objects are unit
/// directions from their ellipsoid's center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientGeometry {
    pub breast: Ellipsoid,
    pub tbv: Ellipsoid,
    pub marker_directions: Vec<[f64; 3]>,
    pub mimics: Vec<Ellipsoid>,
    /// Per mimic: decoy directions and HU values.
    pub mimic_decoys: Vec<Vec<([f64; 3], f32)>>,
    /// Scattered decoys: direction from the breast center, fraction of the
    /// breast radius, HU.
    pub decoys: Vec<([f64; 3], f64, f32)>,
    /// TBV volume scale per fraction.
    pub volume_scales: Vec<f64>,
}

fn distance(p: [f64; 3], q: [f64; 3]) -> f64 {
    (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt()
}

fn separated(points: &[[f64; 3]], p: [f64; 3], min_mm: f64) -> bool {
    points.iter().all(|&q| distance(p, q) >= min_mm)
}

/// Largest deviation of a standardized sample of size `n` from its mean.
fn z_bound(n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        (n - 1) as f64 / (n as f64).sqrt()
    }
}

/// Directions of `n` points on `e` (shrunk by `scale`) that are pairwise
/// at least `sep_mm` apart.
fn surface_directions(e: &Ellipsoid, scale: f64, n: usize, sep_mm: f64, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    let shrunk = Ellipsoid {
        semi_axes_mm: e.semi_axes_mm.map(|a| a * scale),
        ..*e
    };
    let mut dirs = Vec::with_capacity(n);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..10_000 {
        if dirs.len() == n {
            return Ok(dirs);
        }
        let d = unit_vector(rng);
        let p = shrunk.surface_point(d);
        if separated(&pts, p, sep_mm) {
            dirs.push(d);
            pts.push(p);
        }
    }
    if dirs.len() == n {
        Ok(dirs)
    } else {
        Err(Error::InvalidArgument(format!("cannot place {n} separated surface objects")))
    }
}

/// Samples patient geometry. `n_markers` overrides the marker-count range.
pub fn sample_patient(ds: &DatasetSpec, rng: &mut ChaCha8Rng, fractions: usize, n_markers: Option<usize>) -> Result<PatientGeometry> {
    let grid_center = [0, 1, 2].map(|k| (ds.dims[k] - 1) as f64 * ds.spacing_mm / 2.0);
    let u = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let breast = Ellipsoid {
        center_mm: grid_center.map(|c| c + u(rng, (-ds.breast_offset_mm, ds.breast_offset_mm))),
        semi_axes_mm: [0; 3].map(|_| u(rng, ds.breast_semi_axis_mm)),
    };
    let cv_hi = ds.volume_cv_percent.1 / 100.0;
    let max_scale = (1.0 + cv_hi * z_bound(fractions)).cbrt();
    let min_scale = (1.0 - cv_hi * z_bound(fractions)).max(0.5).cbrt();
    let dot_mm = (ds.marker_radius_vox + 1.0) * ds.spacing_mm;
    let reach = |e: &Ellipsoid| e.semi_axes_mm.iter().fold(0.0f64, |m, &a| m.max(a)) * max_scale + dot_mm;

    // TBV first, then mimics placed just clear of the bodies before them;
    // the whole set is redrawn until it fits the ROI and the breast
    let fits = |e: &Ellipsoid, r: f64| {
        let grown = Ellipsoid {
            semi_axes_mm: e.semi_axes_mm.map(|a| a * max_scale),
            ..*e
        };
        (0..3).all(|k| (e.center_mm[k] - breast.center_mm[k]).abs() + r <= ds.roi_half_width_mm)
            && grown.inside_with_margin(&breast, dot_mm + ds.clearance_mm)
    };
    let mut bodies: Vec<Ellipsoid> = Vec::with_capacity(1 + ds.mimics);
    for _ in 0..10_000 {
        bodies.clear();
        for i in 0..1 + ds.mimics {
            let semi = [0; 3].map(|_| u(rng, ds.tbv_semi_axis_mm));
            let r = semi.iter().fold(0.0f64, |m, &a| m.max(a)) * max_scale + dot_mm;
            let center_mm = if i == 0 {
                let room = (ds.roi_half_width_mm - r).max(0.0);
                breast.center_mm.map(|c| c + u(rng, (-room, room)))
            } else {
                let anchor = bodies[rng.gen_range(0..bodies.len())];
                let d = unit_vector(rng);
                let gap = reach(&anchor) + r + ds.clearance_mm + u(rng, (0.0, ds.clearance_mm));
                [0, 1, 2].map(|k| anchor.center_mm[k] + gap * d[k])
            };
            let cand = Ellipsoid {
                center_mm,
                semi_axes_mm: semi,
            };
            let apart = bodies
                .iter()
                .all(|b| distance(b.center_mm, cand.center_mm) >= reach(b) + r + ds.clearance_mm);
            if !(apart && fits(&cand, r)) {
                break;
            }
            bodies.push(cand);
        }
        if bodies.len() == 1 + ds.mimics {
            break;
        }
    }
    if bodies.len() != 1 + ds.mimics {
        return Err(Error::InvalidArgument("cannot fit the TBV and mimics inside the region of interest; check the ranges".into()));
    }
    let tbv = bodies[0];
    let mimics = bodies[1..].to_vec();

    let n_markers = n_markers.unwrap_or_else(|| rng.gen_range(ds.markers.0..=ds.markers.1.max(ds.markers.0)));
    let sep_mm = ds.min_separation_vox * ds.spacing_mm;
    let hu = |rng: &mut ChaCha8Rng| if ds.decoy_hu.1 > ds.decoy_hu.0 { rng.gen_range(ds.decoy_hu.0..ds.decoy_hu.1) } else { ds.decoy_hu.0 };
    let marker_directions = surface_directions(&tbv, min_scale, n_markers, sep_mm, rng)?;
    let mut mimic_decoys = Vec::with_capacity(mimics.len());
    for m in &mimics {
        let n = rng.gen_range(ds.markers.0..=ds.markers.1.max(ds.markers.0));
        let dirs = surface_directions(m, 1.0, n, sep_mm, rng)?;
        mimic_decoys.push(dirs.into_iter().map(|d| (d, hu(rng))).collect());
    }

    let n_decoys = rng.gen_range(ds.decoys.0..=ds.decoys.1.max(ds.decoys.0));
    let mut decoys = Vec::new();
    let mut pts: Vec<[f64; 3]> = Vec::new();
    for _ in 0..10_000 {
        if decoys.len() == n_decoys {
            break;
        }
        let d = unit_vector(rng);
        let t: f64 = rng.gen_range(0.0..0.8);
        let p = [0, 1, 2].map(|k| breast.center_mm[k] + breast.semi_axes_mm[k] * d[k] * t);
        let clear = bodies.iter().all(|b| distance(b.center_mm, p) >= reach(b) + ds.clearance_mm);
        if clear && separated(&pts, p, sep_mm) {
            decoys.push((d, t, hu(rng)));
            pts.push(p);
        }
    }

    // fraction volumes with an exact target sample CV
    let target_cv = u(rng, ds.volume_cv_percent) / 100.0;
    let volume_scales = if fractions < 2 {
        vec![1.0; fractions]
    } else {
        let z: Vec<f64> = (0..fractions).map(|_| StandardNormal.sample(rng)).collect();
        let m = z.iter().sum::<f64>() / fractions as f64;
        let s = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (fractions - 1) as f64).sqrt();
        z.iter().map(|v| (1.0 + target_cv * (v - m) / s).max(0.5)).collect()
    };
    Ok(PatientGeometry {
        breast,
        tbv,
        marker_directions,
        mimics,
        mimic_decoys,
        decoys,
        volume_scales,
    })
}

/// Phantom spec of one fraction: TBV scaled, everything shifted rigidly.
pub fn fraction_spec(ds: &DatasetSpec, pg: &PatientGeometry, fraction: usize, rng: &mut ChaCha8Rng, seed: u64) -> Result<PhantomSpec> {
    let shift: [f64; 3] = if ds.jitter_mm > 0.0 {
        let n = Normal::new(0.0, ds.jitter_mm).map_err(|e| Error::InvalidArgument(format!("jitter: {e}")))?;
        [0; 3].map(|_| n.sample(rng))
    } else {
        [0.0; 3]
    };
    let scale = pg
        .volume_scales
        .get(fraction)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("fraction {fraction} out of range")))?
        .cbrt();
    let moved = |e: &Ellipsoid, s: f64| Ellipsoid {
        center_mm: [0, 1, 2].map(|k| e.center_mm[k] + shift[k]),
        semi_axes_mm: e.semi_axes_mm.map(|a| a * s),
    };
    let breast = moved(&pg.breast, 1.0);
    let mimics: Vec<Ellipsoid> = pg.mimics.iter().map(|m| moved(m, 1.0)).collect();
    let mut decoys: Vec<([f64; 3], f32)> = pg
        .decoys
        .iter()
        .map(|&(d, t, hu)| ([0, 1, 2].map(|k| breast.center_mm[k] + breast.semi_axes_mm[k] * d[k] * t), hu))
        .collect();
    for (m, dots) in mimics.iter().zip(&pg.mimic_decoys) {
        decoys.extend(dots.iter().map(|&(d, hu)| (m.surface_point(d), hu)));
    }
    Ok(PhantomSpec {
        dims: ds.dims,
        spacing_mm: [ds.spacing_mm; 3],
        breast,
        tbv: moved(&pg.tbv, scale),
        mimics,
        tissue_hu: ds.tissue_hu,
        tissue_noise_hu: ds.tissue_noise_hu,
        tbv_offset_hu: ds.tbv_offset_hu,
        marker_directions: pg.marker_directions.clone(),
        marker_hu: ds.marker_hu,
        marker_radius_vox: ds.marker_radius_vox,
        decoys,
        decoy_radius_vox: ds.marker_radius_vox,
        seed,
    })
}

/// Noise seed of one fraction image.
fn image_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen()
}

/// Specs for all fractions of a patient, from its own random streams.
pub fn patient_specs(ds: &DatasetSpec, seed: u64, patient: usize, fractions: usize, n_markers: Option<usize>) -> Result<Vec<PhantomSpec>> {
    let mut prng = stream(seed, patient, None);
    let pg = sample_patient(ds, &mut prng, fractions, n_markers)?;
    (0..fractions)
        .map(|f| {
            let mut frng = stream(seed, patient, Some(f));
            let s = image_seed(&mut frng);
            fraction_spec(ds, &pg, f, &mut frng, s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionEntry {
    pub fraction: usize,
    pub ct: PathBuf,
    pub breast: PathBuf,
    pub label: PathBuf,
    pub markers: usize,
    pub tbv_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub fractions: Vec<FractionEntry>,
}

/// Dataset manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: DatasetSpec,
    pub patients: Vec<PatientEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in &m.patients {
            for f in &p.fractions {
                for rel in [&f.ct, &f.breast, &f.label] {
                    let full = root.join(rel);
                    let (h, _) = volume::rvol_paths(&full);
                    if !h.exists() {
                        return Err(Error::io(full, std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing")));
                    }
                }
            }
        }
        Ok((m, root))
    }

    pub fn ct_count(&self) -> usize {
        self.patients.iter().map(|p| p.fractions.len()).sum()
    }
}

pub fn patient_id(i: usize) -> String {
    format!("P{i:02}")
}

/// Generates and writes `n_patients x fractions` phantoms under `out_dir`
/// and returns the manifest (also written to `out_dir/manifest.json`).
pub fn generate_dataset(ds: &DatasetSpec, n_patients: usize, fractions: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n_patients == 0 || fractions == 0 {
        return Err(Error::InvalidArgument("need at least one patient and one fraction".into()));
    }
    let mut patients = Vec::with_capacity(n_patients);
    for p in 0..n_patients {
        let id = patient_id(p);
        let specs = patient_specs(ds, seed, p, fractions, None)?;
        let mut entries = Vec::with_capacity(fractions);
        for (f, spec) in specs.iter().enumerate() {
            let ph = generate_phantom(spec)?;
            let rel = PathBuf::from(&id).join(format!("F{f}"));
            let entry = FractionEntry {
                fraction: f,
                ct: rel.join("ct.rvol"),
                breast: rel.join("breast.rvol"),
                label: rel.join("label.rvol"),
                markers: ph.markers.len(),
                tbv_voxels: ph.tbv.count(),
            };
            std::fs::create_dir_all(out_dir.join(&rel)).map_err(|e| Error::io(out_dir.join(&rel), e))?;
            volume::write_volume(&ph.ct, out_dir.join(&entry.ct))?;
            volume::write_mask(&ph.breast, out_dir.join(&entry.breast))?;
            volume::write_mask(&ph.tbv, out_dir.join(&entry.label))?;
            entries.push(entry);
        }
        log::debug!("generated patient {id}");
        patients.push(PatientEntry { id, fractions: entries });
    }
    let manifest = Manifest {
        seed,
        spec: ds.clone(),
        patients,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::{connected_components, generate_saliency, morph_refine, threshold_markers, SaliencyParams};

    fn one(seed: u64, n_markers: Option<usize>) -> (PhantomSpec, Phantom) {
        let spec = patient_specs(&DatasetSpec::default(), seed, 0, 1, n_markers).unwrap().remove(0);
        let ph = generate_phantom(&spec).unwrap();
        (spec, ph)
    }

    #[test]
    fn markers_recovered_and_only_bright_voxels() {
        for seed in 0..6 {
            let (spec, ph) = one(seed, None);
            let params = SaliencyParams::default();
            let m = threshold_markers(&ph.ct, params.threshold_lo_hu, params.threshold_hi_hu);
            let inside = m.and(&ph.breast).unwrap();
            let cc = connected_components(&morph_refine(&inside, params.structuring_element), params.connectivity);
            assert_eq!(cc.len(), spec.marker_directions.len(), "seed {seed}");
            // every thresholded voxel belongs to a stamped marker
            let g = *ph.ct.geometry();
            let centers: Vec<[f64; 3]> = ph.markers.iter().map(|c| c.map(|v| v as f64)).collect();
            for v in inside.foreground() {
                let near = centers.iter().any(|c| (0..3).map(|k| (c[k] - v[k] as f64).powi(2)).sum::<f64>() <= 1.0 + 1e-9);
                assert!(near, "stray bright voxel {v:?} in {:?}", g.dims);
            }
        }
    }

    #[test]
    fn no_markers_no_cues() {
        let mut spec = one(3, None).0;
        spec.marker_directions.clear();
        let ph = generate_phantom(&spec).unwrap();
        assert_eq!(generate_saliency(&ph.ct, &ph.breast, &SaliencyParams::default()).unwrap().cue_count, 0);
    }

    #[test]
    fn tbv_volume_matches_ellipsoid() {
        for seed in 0..5 {
            let (spec, ph) = one(seed, None);
            let g = spec.geometry().unwrap();
            assert!(spec.tbv.semi_axes_mm.iter().all(|a| a / g.spacing[0] >= 4.0));
            let analytic = spec.tbv.volume_mm3() / g.voxel_volume_mm3();
            let rel = (ph.tbv.count() as f64 - analytic).abs() / analytic;
            assert!(rel < 0.05, "seed {seed}: {} vs {analytic}", ph.tbv.count());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (_, a) = one(9, None);
        let (_, b) = one(9, None);
        assert_eq!(a.ct, b.ct);
        assert_eq!(a.tbv, b.tbv);
        let (_, c) = one(10, None);
        assert_ne!(a.ct, c.ct);
    }

    #[test]
    fn fraction_volume_cv_in_band() {
        let ds = DatasetSpec::default();
        for p in 0..6 {
            let vols: Vec<f64> = patient_specs(&ds, 4, p, 5, None)
                .unwrap()
                .iter()
                .map(|s| generate_phantom(s).unwrap().tbv.count() as f64)
                .collect();
            let cv = crate::metrics::coefficient_of_variation(&vols).unwrap();
            assert!((5.0..=15.0).contains(&cv), "patient {p}: cv {cv}");
        }
    }

    #[test]
    fn mimics_share_contrast_but_not_label() {
        let ds = DatasetSpec::default();
        for seed in 0..4 {
            let (spec, ph) = one(seed, None);
            assert_eq!(spec.mimics.len(), ds.mimics);
            let g = spec.geometry().unwrap();
            for m in &spec.mimics {
                let c = g.voxel(m.center_mm).map(|v| v.round() as usize);
                assert!(!ph.tbv.get(c[0], c[1], c[2]));
                let hu = ph.ct.get(c[0], c[1], c[2]);
                assert!(hu > ds.tissue_hu - 5.0 * ds.tissue_noise_hu && hu < 400.0);
                // the mimic and the TBV both sit in the region of interest
                for e in [m, &spec.tbv] {
                    for k in 0..3 {
                        assert!((e.center_mm[k] - spec.breast.center_mm[k]).abs() + e.semi_axes_mm[k] <= ds.roi_half_width_mm + 1e-9);
                    }
                }
            }
            assert!(spec.decoys.len() >= ds.markers.0 * ds.mimics);
        }
    }

    #[test]
    fn default_ranges_always_place() {
        let ds = DatasetSpec::default();
        for p in 0..60 {
            patient_specs(&ds, 7, p, 5, None).unwrap();
            patient_specs(&ds, 7, 100_000 + p, 1, Some(ds.markers.1)).unwrap();
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = one(1, None).0;
        spec.marker_hu = 300.0;
        assert!(generate_phantom(&spec).is_err());
        let mut spec = one(1, None).0;
        spec.tbv.semi_axes_mm = [500.0; 3];
        assert!(generate_phantom(&spec).is_err());
    }
}
