//! Checkpoint directories: `manifest.json` plus one GMT1 file per tensor.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::gmt::{read_gmt, write_gmt, TensorFile};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "geomotion-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors in insertion order plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, TensorFile>,
    pub meta: serde_json::Value,
}

fn file_name_for(name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}.gmt1")
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, tensor) in &ckpt.tensors {
        let file = file_name_for(name);
        if entries.iter().any(|e: &ManifestEntry| e.file == file) {
            return Err(Error::Format(format!("tensor name `{name}` collides on disk")));
        }
        write_gmt(tensor, dir.join(&file))?;
        entries.push(ManifestEntry {
            name: name.clone(),
            file,
            shape: tensor.shape.clone(),
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        tensors: entries,
        meta: ckpt.meta.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let mut tensors = IndexMap::new();
    for entry in manifest.tensors {
        let tensor = read_gmt(dir.join(&entry.file))?;
        if tensor.shape != entry.shape {
            return Err(Error::shape(&entry.name, &entry.shape, &tensor.shape));
        }
        if tensors.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{}`", entry.name)));
        }
    }
    Ok(Checkpoint {
        tensors,
        meta: manifest.meta,
    })
}
