//! Checkpoint directories: `index.tsv` (name, trainable flag, tensor file),
//! one `AVRF` file per parameter under `params/`, and `meta.toml` with
//! free-form metadata (dims, temperature, epoch, accuracy, schedule...).
//!
//! Tensor payloads are `f32`, so a reload rounds weights to single
//! precision.

use std::fs;
use std::path::Path;

use abductive_core::ParamStore;

use crate::error::{IoError, Result};
use crate::tensor_io::{load_tensor, save_tensor};

pub type Meta = toml::Table;

pub fn save_checkpoint(dir: &Path, store: &ParamStore, meta: &Meta) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| IoError::at(&pdir, e))?;
    let mut index = String::new();
    for (id, p) in store.iter() {
        let file = format!("params/{:05}.avrf", id.index());
        save_tensor(&dir.join(&file), &p.value)?;
        index.push_str(&format!("{}\t{}\t{file}\n", p.name, u8::from(p.trainable)));
    }
    let ipath = dir.join("index.tsv");
    fs::write(&ipath, index).map_err(|e| IoError::at(&ipath, e))?;
    let mpath = dir.join("meta.toml");
    let text = toml::to_string(meta).map_err(|e| IoError::Format(e.to_string()))?;
    fs::write(&mpath, text).map_err(|e| IoError::at(&mpath, e))
}

/// Rebuilds the stored parameters as a fresh store (copy into a model with
/// `ParamStore::load_from` or `load_prefix_from`).
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, Meta)> {
    let ipath = dir.join("index.tsv");
    let index = fs::read_to_string(&ipath).map_err(|e| IoError::at(&ipath, e))?;
    let mut store = ParamStore::new();
    for (n, line) in index.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, flag, file] = cols[..] else {
            return Err(IoError::doc(&ipath, format!("line {}: expected name, trainable, file", n + 1)));
        };
        let trainable = match flag {
            "1" => true,
            "0" => false,
            _ => return Err(IoError::doc(&ipath, format!("line {}: trainable flag `{flag}`", n + 1))),
        };
        if store.find(name).is_some() {
            return Err(IoError::doc(&ipath, format!("duplicate parameter {name}")));
        }
        store.add(name, load_tensor(&dir.join(file))?, trainable);
    }
    let mpath = dir.join("meta.toml");
    let meta = match fs::read_to_string(&mpath) {
        Ok(t) => toml::from_str(&t).map_err(|e| IoError::doc(&mpath, e.message().to_string()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Meta::new(),
        Err(e) => return Err(IoError::at(&mpath, e)),
    };
    Ok((store, meta))
}

pub fn has_checkpoint(dir: &Path) -> bool {
    dir.join("index.tsv").is_file()
}
