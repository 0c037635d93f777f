//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `SDLSEG01`, a little-endian u64 header length,
//! a JSON header, then little-endian f32 blobs. The header lists every
//! tensor with its byte offset relative to the start of the blob section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::tensor::Scalar;
use super::unet::{UNetConfig, UNetParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SDLSEG01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
    m: Vec<TensorEntry>,
    v: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: UNetConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: UNetParams<f32>,
    pub optimizer: Option<Adam>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) -> TensorEntry {
        let offset = self.bytes.len() as u64;
        let mut len = 0u64;
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
            len += 1;
        }
        TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
        }
    }
}

/// Writes parameters (as f32), optional optimizer state and free-form
/// metadata.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    params: &UNetParams<S>,
    optimizer: Option<&Adam>,
    metadata: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let mut blobs = BlobWriter { bytes: Vec::new() };
    let tensors: Vec<TensorEntry> = params
        .tensors
        .iter()
        .map(|t| blobs.push(&t.name, &t.shape, t.data().iter().map(|v| v.f64() as f32)))
        .collect();
    let optimizer = optimizer.map(|opt| {
        let mut entries = |state: &[Vec<f64>], suffix: &str| -> Vec<TensorEntry> {
            params
                .tensors
                .iter()
                .zip(state)
                .filter(|(t, _)| t.kind.learnable())
                .map(|(t, s)| blobs.push(&format!("{}.{suffix}", t.name), &t.shape, s.iter().map(|&v| v as f32)))
                .collect()
        };
        let m = entries(&opt.m, "adam_m");
        let v = entries(&opt.v, "adam_v");
        OptimizerHeader {
            config: opt.config,
            step: opt.step,
            m,
            v,
        }
    });
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        tensors,
        optimizer,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(MAGIC)
        .and_then(|_| f.write_all(&(json.len() as u64).to_le_bytes()))
        .and_then(|_| f.write_all(&json))
        .and_then(|_| f.write_all(&blobs.bytes))
        .map_err(|e| Error::io(path, e))
}

fn read_blob(blobs: &[u8], e: &TensorEntry) -> Result<Vec<f32>> {
    let expect: usize = e.shape.iter().product();
    if expect as u64 != e.len {
        return Err(Error::Shape(format!(
            "tensor {} lists {} values for shape {:?}",
            e.name, e.len, e.shape
        )));
    }
    let start = e.offset as usize;
    let end = start
        .checked_add(e.len as usize * 4)
        .filter(|&end| end <= blobs.len())
        .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of the file", e.name)))?;
    Ok(blobs[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    Ok((header, &body[hlen..]))
}

/// Loads a checkpoint, using the configuration stored in it.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, blobs) = parse(&bytes)?;
    let config = header.config.clone();
    build(header, blobs, config)
}

/// Loads a checkpoint into a network of the given configuration. Fails with
/// a shape error naming the first tensor that does not fit.
pub fn load_checkpoint_as(path: &Path, config: &UNetConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, blobs) = parse(&bytes)?;
    build(header, blobs, config.clone())
}

fn build(header: Header, blobs: &[u8], config: UNetConfig) -> Result<Checkpoint> {
    let tensors = header
        .tensors
        .iter()
        .map(|e| Ok((e.name.clone(), e.shape.clone(), read_blob(blobs, e)?)))
        .collect::<Result<Vec<_>>>()?;
    let params = UNetParams::from_tensors(config, tensors)?;
    let optimizer = match header.optimizer {
        None => None,
        Some(o) => {
            let mut opt = Adam::new(o.config, &params);
            opt.step = o.step;
            let learnable: Vec<usize> = (0..params.tensors.len())
                .filter(|&i| params.tensors[i].kind.learnable())
                .collect();
            if o.m.len() != learnable.len() || o.v.len() != learnable.len() {
                return Err(Error::Shape("optimizer state does not match the parameters".into()));
            }
            for (k, &i) in learnable.iter().enumerate() {
                for (dst, e) in [(&mut opt.m[i], &o.m[k]), (&mut opt.v[i], &o.v[k])] {
                    let vals = read_blob(blobs, e)?;
                    if vals.len() != dst.len() {
                        return Err(Error::Shape(format!("optimizer tensor {} has wrong length", e.name)));
                    }
                    dst.iter_mut().zip(vals).for_each(|(d, v)| *d = v as f64);
                }
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        params,
        optimizer,
        metadata: header.metadata,
    })
}
