//! Binary model files: `SFCN`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then the parameters as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Layout, ModelError, ModelParams, Result};
use crate::ingest::{Level, NormStats};

pub const MAGIC: [u8; 4] = *b"SFCN";
pub const VERSION: u32 = 1;

// Headers are small; anything larger is corrupt.
const MAX_HEADER: u64 = 64 << 20;
const PREAMBLE: usize = 4 + 4 + 8;

/// Everything needed to forecast with a trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: ModelParams,
    pub norm: NormStats,
    pub indicator_names: Vec<String>,
    pub slot_order: Vec<Level>,
    pub horizon: usize,
}

impl ModelFile {
    pub fn arch(&self) -> &Architecture {
        self.params.arch()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    /// Byte length.
    length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: Architecture,
    indicator_names: Vec<String>,
    slot_order: Vec<Level>,
    norm_stats: NormStats,
    horizon: usize,
    tensors: Vec<ManifestEntry>,
}

fn check_consistency(model: &ModelFile) -> Result<()> {
    let arch = model.arch();
    if model.indicator_names.len() != arch.rows {
        return Err(ModelError::Manifest(format!(
            "{} indicator names for {} rows",
            model.indicator_names.len(),
            arch.rows
        )));
    }
    if model.slot_order.len() != arch.num_slots {
        return Err(ModelError::Manifest(format!(
            "{} slot levels for {} input slots",
            model.slot_order.len(),
            arch.num_slots
        )));
    }
    model
        .norm
        .validate()
        .map_err(|e| ModelError::Manifest(e.to_string()))?;
    if model.norm.num_slots != arch.num_slots || model.norm.rows != arch.rows {
        return Err(ModelError::Manifest(format!(
            "norm stats are {}x{}, network input is {}x{}",
            model.norm.num_slots, model.norm.rows, arch.num_slots, arch.rows
        )));
    }
    if model.horizon == 0 {
        return Err(ModelError::Manifest("horizon must be >= 1".into()));
    }
    Ok(())
}

fn check_finite(params: &ModelParams) -> Result<()> {
    for t in &params.layout().tensors {
        if params.values()[t.offset..t.offset + t.len]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(ModelError::NonFinite(t.name.clone()));
        }
    }
    Ok(())
}

pub fn model_to_bytes(model: &ModelFile) -> Result<Vec<u8>> {
    check_consistency(model)?;
    check_finite(&model.params)?;
    let header = Header {
        architecture: model.arch().clone(),
        indicator_names: model.indicator_names.clone(),
        slot_order: model.slot_order.clone(),
        norm_stats: model.norm.clone(),
        horizon: model.horizon,
        tensors: model
            .params
            .layout()
            .tensors
            .iter()
            .map(|t| ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: 8 * t.offset as u64,
                length: 8 * t.len as u64,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Header(e.to_string()))?;
    let values = model.params.values();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 8 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < 4 {
        let mut magic = [0u8; 4];
        magic[..bytes.len()].copy_from_slice(bytes);
        return Err(ModelError::BadMagic(magic));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(ModelError::Header("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let rest = (bytes.len() - PREAMBLE) as u64;
    if header_len > MAX_HEADER || header_len > rest {
        return Err(ModelError::Header(format!(
            "header length {header_len} exceeds the {rest} bytes after the preamble"
        )));
    }
    let (json, payload) = bytes[PREAMBLE..].split_at(header_len as usize);
    let header: Header =
        serde_json::from_slice(json).map_err(|e| ModelError::Header(e.to_string()))?;

    let arch = header.architecture;
    let layout = Layout::new(&arch)?;
    if header.tensors.len() != layout.tensors.len() {
        return Err(ModelError::Manifest(format!(
            "manifest lists {} tensors, architecture has {}",
            header.tensors.len(),
            layout.tensors.len()
        )));
    }
    for (entry, spec) in header.tensors.iter().zip(&layout.tensors) {
        if entry.name != spec.name
            || entry.shape != spec.shape
            || entry.offset != 8 * spec.offset as u64
            || entry.length != 8 * spec.len as u64
        {
            return Err(ModelError::Manifest(format!(
                "tensor `{}` {:?} at byte {} (+{}) does not match expected `{}` {:?}",
                entry.name, entry.shape, entry.offset, entry.length, spec.name, spec.shape
            )));
        }
    }
    let expected = 8 * layout.total as u64;
    if payload.len() as u64 != expected {
        return Err(ModelError::PayloadLengthMismatch {
            expected,
            actual: payload.len() as u64,
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_values(&arch, values)?;
    check_finite(&params)?;
    let model = ModelFile {
        params,
        norm: header.norm_stats,
        indicator_names: header.indicator_names,
        slot_order: header.slot_order,
        horizon: header.horizon,
    };
    check_consistency(&model)?;
    Ok(model)
}

pub fn save_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    model_from_bytes(&fs::read(path)?)
}
