//! Checkpoint files: a JSON manifest next to a raw blob.
//!
//! `<name>.json` lists dtype and ordered tensor records (name, shape, byte
//! offset); `<name>.bin` holds the values as little-endian `f32`, row-major,
//! at exactly those offsets. Offsets must be contiguous and the blob length
//! must equal the summed element counts times four bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{MetError, Result};
use crate::tensor::Tensor;

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointManifest {
    /// Reject wrong dtype, duplicate names, non-contiguous offsets, and a
    /// blob length that disagrees with the records.
    pub fn validate(&self, blob_len: u64) -> Result<()> {
        if self.dtype != DTYPE_F32LE {
            return Err(MetError::Checkpoint(format!(
                "unsupported dtype {:?}, expected {DTYPE_F32LE:?}",
                self.dtype
            )));
        }
        let mut expected_offset = 0u64;
        let mut seen = std::collections::BTreeSet::new();
        for record in &self.tensors {
            if !seen.insert(&record.name) {
                return Err(MetError::Checkpoint(format!(
                    "duplicate tensor name {:?}",
                    record.name
                )));
            }
            if record.offset != expected_offset {
                return Err(MetError::Checkpoint(format!(
                    "tensor {:?} at offset {}, expected contiguous offset {expected_offset}",
                    record.name, record.offset
                )));
            }
            let numel: usize = record.shape.iter().product();
            if record.shape.is_empty() || record.shape.contains(&0) {
                return Err(MetError::Checkpoint(format!(
                    "tensor {:?} has invalid shape {:?}",
                    record.name, record.shape
                )));
            }
            expected_offset += numel as u64 * 4;
        }
        if blob_len != expected_offset {
            return Err(MetError::Checkpoint(format!(
                "blob has {blob_len} bytes, manifest expects {expected_offset}"
            )));
        }
        Ok(())
    }
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Write named tensors to `<base>.json` + `<base>.bin` in iteration order.
/// Values are truncated to `f32`.
pub fn save_checkpoint(tensors: &[(String, &Tensor)], base: &Path) -> Result<()> {
    if let Some(parent) = base.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in tensors {
        if !seen.insert(name) {
            return Err(MetError::Checkpoint(format!(
                "duplicate parameter name {name:?}"
            )));
        }
    }
    let mut records = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, tensor) in tensors {
        records.push(TensorRecord {
            name: name.clone(),
            shape: tensor.shape.clone(),
            offset: blob.len() as u64,
        });
        for &v in &tensor.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        dtype: DTYPE_F32LE.into(),
        tensors: records,
    };
    let (json_path, bin_path) = paths(base);
    fs::write(json_path, serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(bin_path, blob)?;
    Ok(())
}

/// Read `<base>.json` + `<base>.bin` back into named tensors, validating the
/// manifest against the blob first.
pub fn load_checkpoint(base: &Path) -> Result<BTreeMap<String, Tensor>> {
    let (json_path, bin_path) = paths(base);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&json_path)?)?;
    let blob = fs::read(&bin_path)?;
    manifest.validate(blob.len() as u64)?;

    let mut out = BTreeMap::new();
    for record in &manifest.tensors {
        let numel: usize = record.shape.iter().product();
        let start = record.offset as usize;
        let data: Vec<f64> = blob[start..start + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if record.shape.len() != 2 {
            return Err(MetError::Checkpoint(format!(
                "tensor {:?} has rank {} shape, expected rank 2",
                record.name,
                record.shape.len()
            )));
        }
        out.insert(
            record.name.clone(),
            Tensor::new(record.shape[0], record.shape[1], data)?,
        );
    }
    Ok(out)
}

/// Callback receiving each (name, tensor) slot a checkpoint should fill.
pub type TensorSlotFn<'a> = dyn FnMut(&str, &mut Tensor) -> Result<()> + 'a;

/// Move loaded tensors into the parameters enumerated by `visit`, consuming
/// the map. Shape disagreements and names without a matching parameter are
/// errors; the latter lists every unknown name.
pub fn apply_named_tensors(
    mut loaded: BTreeMap<String, Tensor>,
    visit: &mut dyn FnMut(&mut TensorSlotFn) -> Result<()>,
) -> Result<()> {
    let mut failure = None;
    visit(&mut |name: &str, tensor: &mut Tensor| {
        if failure.is_some() {
            return Ok(());
        }
        match loaded.remove(name) {
            Some(new) => {
                if new.shape != tensor.shape {
                    failure = Some(MetError::Checkpoint(format!(
                        "tensor {name:?} has shape {:?}, model expects {:?}",
                        new.shape, tensor.shape
                    )));
                } else {
                    tensor.data = new.data;
                }
                Ok(())
            }
            None => {
                failure = Some(MetError::Checkpoint(format!(
                    "checkpoint is missing tensor {name:?}"
                )));
                Ok(())
            }
        }
    })?;
    if let Some(err) = failure {
        return Err(err);
    }
    if !loaded.is_empty() {
        let unknown: Vec<&String> = loaded.keys().collect();
        return Err(MetError::Checkpoint(format!(
            "checkpoint contains unknown tensors: {unknown:?}"
        )));
    }
    Ok(())
}
