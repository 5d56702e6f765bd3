//! Checkpoint layout: `manifest.json` (architecture, shapes, freeze state, task
//! routers, keys, hyperparameters) plus one `param_NNNN.f64` file per matrix
//! holding its values as little-endian 64-bit floats in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Model;
use crate::tensor::{Matrix, ParamStore};

pub const FORMAT: &str = "branchlora-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub id: usize,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Index of the last task trained before this snapshot.
    pub task_index: usize,
    pub model: Model,
    pub params: Vec<ParamEntry>,
}

fn io(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn save(model: &Model, task_index: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut params = Vec::with_capacity(model.store.len());
    for (id, p) in model.store.iter() {
        let file = format!("param_{:04}.f64", id.0);
        let bytes: Vec<u8> = p
            .value
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        params.push(ParamEntry {
            id: id.0,
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            frozen: p.frozen,
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        task_index,
        model: model.clone(),
        params,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io(&path, e))?;
    fs::write(&path, text).map_err(|e| io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| io(&path, e))?;
    if m.format != FORMAT {
        return Err(io(&path, format!("unsupported format `{}`", m.format)));
    }
    Ok(m)
}

/// Restores a model with every parameter value and freeze flag.
pub fn load(dir: &Path) -> Result<(Model, usize)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::new();
    for (i, entry) in manifest.params.iter().enumerate() {
        if entry.id != i {
            return Err(io(dir, format!("parameter ids out of order at {i}")));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
        if bytes.len() != entry.rows * entry.cols * 8 {
            return Err(io(
                &path,
                format!(
                    "expected {} bytes, found {}",
                    entry.rows * entry.cols * 8,
                    bytes.len()
                ),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(
            entry.name.clone(),
            Matrix::from_vec(entry.rows, entry.cols, data)?,
            entry.frozen,
        );
    }
    let mut model = manifest.model;
    model.store = store;
    Ok((model, manifest.task_index))
}
