//! Checkpoint directories: `manifest.json` plus one little-endian `f64`
//! `.bin` file per array.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    /// Running statistics rather than a trained weight.
    #[serde(default)]
    pub buffer: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A versioned parameter bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub params: ParamSet,
    pub buffers: ParamSet,
    pub meta: serde_json::Value,
}

/// Writes a slice of `f64` as little-endian bytes.
pub fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint {
            path: path.into(),
            msg: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, params: ParamSet, buffers: ParamSet, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), params, buffers, meta }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut arrays = Vec::new();
        for (set, buffer) in [(&self.params, false), (&self.buffers, true)] {
            for (name, t) in set.iter() {
                let file = file_name(name);
                write_f64_le(&dir.join(&file), t.data())?;
                arrays.push(ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), file, buffer });
            }
        }
        let manifest =
            Manifest { version: CHECKPOINT_VERSION, kind: self.kind.clone(), arrays, meta: self.meta.clone() };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint { path, msg: format!("unsupported version {}", manifest.version) });
        }
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        for entry in &manifest.arrays {
            let file = dir.join(&entry.file);
            let data = read_f64_le(&file)?;
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Checkpoint { path: file.clone(), msg: e.to_string() })?;
            if entry.buffer {
                buffers.insert(entry.name.clone(), t);
            } else {
                params.insert(entry.name.clone(), t);
            }
        }
        Ok(Self { kind: manifest.kind, params, buffers, meta: manifest.meta })
    }

    pub fn expect_kind(self, kind: &str, dir: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint {
                path: dir.into(),
                msg: format!("expected a {kind} checkpoint, found {}", self.kind),
            });
        }
        Ok(self)
    }
}
