//! Per-image preparation: resample, crop around the breast, saliency from
//! the cropped HU image, then HU windowing.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::Result;
use crate::phantom::Manifest;
use crate::preproc::{compute_crop_center, crop_or_pad_mask, crop_or_pad_volume, normalize_hu, resample_mask_nearest, resample_trilinear};
use crate::saliency::{generate_saliency_limited, SaliencyMap, SaliencyParams};
use crate::volume::{self, Mask3, Volume3};

#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub target_spacing_mm: [f64; 3],
    pub crop: [usize; 3],
    pub hu_window: (f32, f32),
    pub saliency: SaliencyParams,
}

impl PrepConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        PrepConfig {
            target_spacing_mm: [cfg.target_spacing_mm; 3],
            crop: [cfg.crop_size; 3],
            hu_window: cfg.hu_window(),
            saliency: cfg.saliency(),
        }
    }
}

/// An image on the network grid.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub patient: String,
    pub fraction: usize,
    /// Cropped CT in HU (kept for cue ablation).
    pub ct_hu: Volume3,
    pub breast: Mask3,
    pub ct_norm: Volume3,
    pub saliency: SaliencyMap,
    pub label: Option<Mask3>,
}

impl PreparedCase {
    pub fn fraction_id(&self) -> String {
        format!("F{}", self.fraction)
    }

    /// Saliency from only the `n` largest cues; `n = 0` gives an all-zero map.
    pub fn saliency_with_cues(&self, params: &SaliencyParams, n: usize) -> Result<SaliencyMap> {
        generate_saliency_limited(&self.ct_hu, &self.breast, params, Some(n))
    }
}

pub fn prepare(patient: &str, fraction: usize, ct_hu: &Volume3, breast: &Mask3, label: Option<&Mask3>, cfg: &PrepConfig) -> Result<PreparedCase> {
    ct_hu.geometry().ensure_same(breast.geometry(), "prepare ct/breast")?;
    if let Some(l) = label {
        ct_hu.geometry().ensure_same(l.geometry(), "prepare ct/label")?;
    }
    let ct = resample_trilinear(ct_hu, cfg.target_spacing_mm)?;
    let breast = resample_mask_nearest(breast, cfg.target_spacing_mm)?;
    let center = compute_crop_center(&breast)?;
    let ct = crop_or_pad_volume(&ct, center, cfg.crop)?;
    let breast = crop_or_pad_mask(&breast, center, cfg.crop)?;
    let label = label
        .map(|l| resample_mask_nearest(l, cfg.target_spacing_mm).and_then(|l| crop_or_pad_mask(&l, center, cfg.crop)))
        .transpose()?;
    let saliency = generate_saliency_limited(&ct, &breast, &cfg.saliency, None)?;
    let ct_norm = normalize_hu(&ct, cfg.hu_window)?;
    Ok(PreparedCase {
        patient: patient.to_string(),
        fraction,
        ct_hu: ct,
        breast,
        ct_norm,
        saliency,
        label,
    })
}

/// Reads and prepares every image listed in a manifest, in manifest order.
pub fn prepare_manifest(manifest: &Manifest, root: &Path, cfg: &PrepConfig) -> Result<Vec<PreparedCase>> {
    let mut out = Vec::with_capacity(manifest.ct_count());
    for p in &manifest.patients {
        for f in &p.fractions {
            let ct = volume::read_volume(root.join(&f.ct))?;
            let breast = volume::read_mask(root.join(&f.breast))?;
            let label = volume::read_mask(root.join(&f.label))?;
            out.push(prepare(&p.id, f.fraction, &ct, &breast, Some(&label), cfg)?);
        }
    }
    Ok(out)
}
