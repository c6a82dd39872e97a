//! `protoneck-v1` checkpoints: a JSON manifest naming every array with its
//! shape and byte offset, next to a flat little-endian `f64` blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const VERSION: &str = "protoneck-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub blob: String,
    pub entries: Vec<Entry>,
}

/// Paths of the manifest and blob for a checkpoint stem such as
/// `out/checkpoint_final`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save(stem: &Path, store: &ParamStore, config_hash: &str, seed: u64, epoch: usize) -> Result<Manifest> {
    let (json, bin) = paths(stem);
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: VERSION.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        epoch,
        blob: bin.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        entries,
    };
    if let Some(dir) = json.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&bin, &blob)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&json, text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest {}: {e}", path.display())))?;
    if m.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version `{}`", m.version)));
    }
    Ok(m)
}

/// Loads the arrays named in `manifest_path` into `store`. Every parameter of
/// `store` must be present with the same shape, and nothing else.
pub fn load_into(manifest_path: &Path, store: &mut ParamStore) -> Result<Manifest> {
    let m = read_manifest(manifest_path)?;
    let bin = manifest_path.with_file_name(&m.blob);
    let blob = std::fs::read(&bin).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", bin.display())))?;
    if m.entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} arrays, model expects {}",
            m.entries.len(),
            store.len()
        )));
    }
    let mut loaded = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let id = store
            .id_of(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected array `{}`", e.name)))?;
        if store.get(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "array `{}` has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                store.get(id).shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("blob too short for `{}`", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        loaded.push((id, Tensor::new(e.shape.clone(), data)?));
    }
    for (id, t) in loaded {
        *store.get_mut(id) = t;
    }
    Ok(m)
}
