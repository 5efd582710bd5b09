//! Checkpoint archive: a magic header, a JSON manifest describing every
//! parameter, then raw little-endian f32 blobs in manifest order. All
//! parameter values live on the f32 grid (initializers and updates snap to
//! it), so a save and load round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

/// Leading magic bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WEFTCKP1";

/// Current manifest schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestJson {
    version: u32,
    meta: BTreeMap<String, String>,
    params: Vec<ParamEntry>,
}

/// What a load reported back: checkpoint metadata plus which target
/// parameters were written and which were left at their current values.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub meta: BTreeMap<String, String>,
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

/// Writes the full parameter set plus free-form metadata to `path`.
pub fn save_checkpoint(
    path: &Path,
    set: &ParamSet,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let names = set.sorted_names();
    let mut params = Vec::with_capacity(names.len());
    let mut blob: Vec<u8> = Vec::new();
    for name in &names {
        let value = set.value_by_name(name)?;
        params.push(ParamEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            trainable: set.is_trainable(name)?,
        });
        for &v in value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = ManifestJson { version: CHECKPOINT_VERSION, meta: meta.clone(), params };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| WeftError::Checkpoint(format!("manifest serialization: {e}")))?;

    let mut file = fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&blob)?;
    Ok(())
}

fn read_archive(path: &Path) -> Result<(ManifestJson, Vec<u8>)> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| WeftError::Checkpoint("file too short for the magic header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(WeftError::Checkpoint(format!(
            "bad magic {:?}; not a checkpoint file",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| WeftError::Checkpoint("file too short for the manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| WeftError::Checkpoint("truncated manifest".into()))?;
    let manifest: ManifestJson = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| WeftError::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(WeftError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() * 4)
        .sum();
    if blob.len() != expected {
        return Err(WeftError::Checkpoint(format!(
            "blob holds {} bytes but the manifest describes {expected}",
            blob.len()
        )));
    }
    Ok((manifest, blob))
}

fn decode_tensor(entry: &ParamEntry, blob: &[u8], offset: &mut usize) -> Tensor {
    let count: usize = entry.shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let bytes: [u8; 4] = blob[*offset..*offset + 4].try_into().unwrap();
        data.push(f32::from_le_bytes(bytes) as f64);
        *offset += 4;
    }
    Tensor::from_vec(&entry.shape, data)
}

/// Reads just the metadata map, without decoding parameter blobs.
pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(read_archive(path)?.0.meta)
}

/// Loads a checkpoint into a standalone parameter set.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, BTreeMap<String, String>)> {
    let (manifest, blob) = read_archive(path)?;
    let mut set = ParamSet::new();
    let mut offset = 0usize;
    let mut trainable = Vec::new();
    for entry in &manifest.params {
        let value = decode_tensor(entry, &blob, &mut offset);
        set.register(&entry.name, value)?;
        if entry.trainable {
            trainable.push(entry.name.clone());
        }
    }
    set.set_trainable_where(|name| trainable.iter().any(|t| t == name));
    Ok((set, manifest.meta))
}

/// Loads checkpoint values into an existing parameter set. Every
/// checkpoint parameter must exist in the target with a matching shape.
/// Target parameters absent from the checkpoint are an error unless
/// `allow_partial` is set, in which case they keep their current values
/// and are listed in the report.
pub fn load_into(path: &Path, set: &mut ParamSet, allow_partial: bool) -> Result<LoadReport> {
    let (manifest, blob) = read_archive(path)?;
    let target: Vec<String> = set.sorted_names();

    let mut offset = 0usize;
    let mut loaded = Vec::new();
    for entry in &manifest.params {
        let value = decode_tensor(entry, &blob, &mut offset);
        if !target.iter().any(|n| n == &entry.name) {
            return Err(WeftError::Checkpoint(format!(
                "checkpoint parameter '{}' does not exist in the model",
                entry.name
            )));
        }
        set.set_value(&entry.name, value).map_err(|e| {
            WeftError::Checkpoint(format!("parameter '{}': {e}", entry.name))
        })?;
        loaded.push(entry.name.clone());
    }

    let skipped: Vec<String> =
        target.into_iter().filter(|n| !loaded.contains(n)).collect();
    if !skipped.is_empty() && !allow_partial {
        return Err(WeftError::Checkpoint(format!(
            "checkpoint is missing {} model parameters (first: {})",
            skipped.len(),
            skipped[0]
        )));
    }
    Ok(LoadReport { meta: manifest.meta, loaded, skipped })
}
