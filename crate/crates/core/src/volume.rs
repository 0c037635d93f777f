//! 3D scalar volumes and binary masks with physical geometry, plus the RVOL
//! on-disk format.
//!
//! RVOL stores a volume as two files sharing a stem: `<stem>.json` holds the
//! header (dims, spacing, origin, dtype, layout, version and optional
//! free-form metadata) and `<stem>.raw` holds the little-endian payload in
//! x-fastest order, i.e. the voxel `(x, y, z)` lives at flat index
//! `z * ny * nx + y * nx + x`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RVOL_VERSION: u32 = 1;
pub const RVOL_LAYOUT: &str = "x-fastest";

/// Grid geometry shared by volumes and masks. Voxel centers sit at
/// `origin + index * spacing` (millimetres).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Geometry with unit spacing and zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::InvalidArgument("voxel count overflows".into()));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be finite and > 0, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    /// World position (mm) of a voxel center.
    pub fn world(&self, voxel: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + voxel[0] * self.spacing[0],
            self.origin[1] + voxel[1] * self.spacing[1],
            self.origin[2] + voxel[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinate of a world position.
    pub fn voxel(&self, world: [f64; 3]) -> [f64; 3] {
        [
            (world[0] - self.origin[0]) / self.spacing[0],
            (world[1] - self.origin[1]) / self.spacing[1],
            (world[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Exact equality of dims, spacing and origin; errors name the operation.
    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Geometry(format!(
                "{what}: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )));
        }
        Ok(())
    }
}

/// A 3D grid of f32 values (HU, probabilities, saliency).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Format(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                geom.dims,
                geom.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite voxel value at index {i}")));
        }
        Ok(Volume3 { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        Self::new(geom, vec![value; geom.len()])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        geom.validate()?;
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(geom, data)
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    /// Applies `f` voxel-wise, keeping the geometry.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Volume3> {
        Volume3::new(self.geom, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// A binary 3D grid; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3 {
    geom: Geometry,
    data: Vec<u8>,
}

impl Eq for Geometry {}

impl Mask3 {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Format(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                geom.dims,
                geom.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Format(format!(
                "mask value {} at index {i} is not 0 or 1",
                data[i]
            )));
        }
        Ok(Mask3 { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Result<Self> {
        Self::new(geom, vec![0; geom.len()])
    }

    pub fn ones(geom: Geometry) -> Result<Self> {
        Self::new(geom, vec![1; geom.len()])
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        geom.validate()?;
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Self::new(geom, data)
    }

    /// Builds a mask from foreground voxel coordinates.
    pub fn from_voxels(geom: Geometry, voxels: &[[usize; 3]]) -> Result<Self> {
        let mut m = Self::zeros(geom)?;
        for &[x, y, z] in voxels {
            if x >= geom.dims[0] || y >= geom.dims[1] || z >= geom.dims[2] {
                return Err(Error::InvalidArgument(format!(
                    "voxel ({x},{y},{z}) outside dims {:?}",
                    geom.dims
                )));
            }
            m.set(x, y, z, true);
        }
        Ok(m)
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geom.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.geom.index(x, y, z);
        self.data[i] = value as u8;
    }

    #[inline]
    pub fn get_flat(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    #[inline]
    pub fn set_flat(&mut self, i: usize, value: bool) {
        self.data[i] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Coordinates of all foreground voxels in scan order.
    pub fn foreground(&self) -> Vec<[usize; 3]> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| self.geom.coords(i))
            .collect()
    }

    pub fn and(&self, other: &Mask3) -> Result<Mask3> {
        self.geom.ensure_same(&other.geom, "mask and")?;
        Ok(Mask3 {
            geom: self.geom,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
        })
    }

    pub fn to_volume(&self) -> Volume3 {
        Volume3 {
            geom: self.geom,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Element type stored in an RVOL payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

/// The JSON sidecar of an RVOL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvolHeader {
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub origin_mm: [f64; 3],
    pub dtype: Dtype,
    pub layout: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl RvolHeader {
    fn new(geom: &Geometry, dtype: Dtype, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        RvolHeader {
            version: RVOL_VERSION,
            dims: geom.dims,
            spacing_mm: geom.spacing,
            origin_mm: geom.origin,
            dtype,
            layout: RVOL_LAYOUT.to_string(),
            metadata,
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing_mm, self.origin_mm)
            .map_err(|e| Error::Format(format!("bad RVOL geometry: {e}")))
    }
}

/// Header and payload paths for an RVOL stem. A trailing `.rvol`, `.json` or
/// `.raw` extension is stripped, so `ct.rvol`, `ct.json` and `ct` all name the
/// same pair `ct.json` + `ct.raw`.
pub fn rvol_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("rvol") | Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (PathBuf::from(header), PathBuf::from(raw))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<RvolHeader> {
    let (hpath, _) = rvol_paths(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: RvolHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", hpath.display())))?;
    if header.version != RVOL_VERSION {
        return Err(Error::Format(format!(
            "unsupported RVOL version {}",
            header.version
        )));
    }
    if header.layout != RVOL_LAYOUT {
        return Err(Error::Format(format!("unsupported layout {:?}", header.layout)));
    }
    Ok(header)
}

fn read_payload(path: &Path, header: &RvolHeader, expect: Dtype) -> Result<(Geometry, Vec<u8>)> {
    if header.dtype != expect {
        return Err(Error::Format(format!(
            "expected dtype {expect:?}, header declares {:?}",
            header.dtype
        )));
    }
    let geom = header.geometry()?;
    let (_, rpath) = rvol_paths(path);
    let bytes = fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let elem = match expect {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    if bytes.len() != geom.len() * elem {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, dims {:?} need {}",
            rpath.display(),
            bytes.len(),
            geom.dims,
            geom.len() * elem
        )));
    }
    Ok((geom, bytes))
}

fn write_pair(path: &Path, header: &RvolHeader, payload: &[u8]) -> Result<()> {
    let (hpath, rpath) = rvol_paths(path);
    if let Some(dir) = hpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))?;
    fs::write(&rpath, payload).map_err(|e| Error::io(&rpath, e))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    read_volume_with_header(path).map(|(v, _)| v)
}

pub fn read_volume_with_header(path: impl AsRef<Path>) -> Result<(Volume3, RvolHeader)> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let (geom, bytes) = read_payload(path, &header, Dtype::F32)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let v = Volume3::new(geom, data).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((v, header))
}

pub fn write_volume(v: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    write_volume_with_metadata(v, path, BTreeMap::new())
}

pub fn write_volume_with_metadata(
    v: &Volume3,
    path: impl AsRef<Path>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    v.geom.validate()?;
    let header = RvolHeader::new(&v.geom, Dtype::F32, metadata);
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_pair(path.as_ref(), &header, &payload)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let (geom, bytes) = read_payload(path, &header, Dtype::U8)?;
    Mask3::new(geom, bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_mask(m: &Mask3, path: impl AsRef<Path>) -> Result<()> {
    m.geom.validate()?;
    let header = RvolHeader::new(&m.geom, Dtype::U8, BTreeMap::new());
    write_pair(path.as_ref(), &header, &m.data)
}
