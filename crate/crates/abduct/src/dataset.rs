//! Dataset directory layout:
//!
//! ```text
//! root/
//!   manifest.<split>.tsv        sample_id, video_id, mask_index
//!   samples/<sample_id>.toml    sample documents
//!   videos/<video_id>/e<i>.{features,frames}.avrf
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use abductive_core::data::{ManifestEntry, Sample, Split, SplitManifest, VideoAnnotation};
use abductive_core::hypothesis::HypothesisSet;

use crate::error::{IoError, Result};
use crate::sample_io::{doc_for, load_sample, write_sample_doc};
use crate::tensor_io::save_tensor;

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("manifest.{}.tsv", split.as_str()))
}

pub fn sample_path(root: &Path, sample_id: &str) -> PathBuf {
    root.join("samples").join(format!("{sample_id}.toml"))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| IoError::at(p, e))
}

/// Writes video tensors once and one document per sample.
pub fn write_split(root: &Path, split: Split, videos: &[VideoAnnotation], samples: &[Sample], manifest: &SplitManifest) -> Result<()> {
    mkdir(&root.join("samples"))?;
    let mut rel: BTreeMap<&str, Vec<(Option<String>, Option<String>)>> = BTreeMap::new();
    for v in videos {
        let vdir = root.join("videos").join(&v.video_id);
        mkdir(&vdir)?;
        let mut paths = Vec::with_capacity(v.events.len());
        for (i, e) in v.events.iter().enumerate() {
            let one = |t: &Option<abductive_core::Tensor>, kind: &str| -> Result<Option<String>> {
                let Some(t) = t else { return Ok(None) };
                save_tensor(&vdir.join(format!("e{i}.{kind}.avrf")), t)?;
                Ok(Some(format!("../videos/{}/e{i}.{kind}.avrf", v.video_id)))
            };
            paths.push((one(&e.frame_features, "features")?, one(&e.frames, "frames")?));
        }
        rel.insert(&v.video_id, paths);
    }
    let by_id: BTreeMap<&str, &ManifestEntry> = manifest.entries.iter().map(|m| (m.sample_id.as_str(), m)).collect();
    for s in samples {
        let entry = by_id
            .get(s.sample_id.as_str())
            .ok_or_else(|| IoError::Format(format!("{} missing from manifest", s.sample_id)))?;
        let paths = rel
            .get(entry.video_id.as_str())
            .ok_or_else(|| IoError::Format(format!("video {} not written", entry.video_id)))?;
        write_sample_doc(&sample_path(root, &s.sample_id), &doc_for(s, paths))?;
    }
    write_manifest(&manifest_path(root, split), &manifest.entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.sample_id, e.video_id, e.mask_index));
    }
    fs::write(path, out).map_err(|e| IoError::at(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| IoError::at(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| IoError::at(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [sample_id, video_id, mask] = cols[..] else {
            return Err(IoError::doc(path, format!("line {}: expected 3 tab-separated fields", n + 1)));
        };
        let mask_index = mask
            .parse()
            .map_err(|_| IoError::doc(path, format!("line {}: mask_index `{mask}` is not an integer", n + 1)))?;
        out.push(ManifestEntry {
            sample_id: sample_id.to_string(),
            video_id: video_id.to_string(),
            mask_index,
        });
    }
    Ok(out)
}

/// Loads a split in manifest order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    read_manifest(&manifest_path(root, split))?
        .iter()
        .map(|e| {
            let path = sample_path(root, &e.sample_id);
            let s = load_sample(&path)?;
            if s.mask_index != e.mask_index {
                return Err(IoError::doc(&path, format!("mask_index {} disagrees with manifest ({})", s.mask_index, e.mask_index)));
            }
            Ok(s)
        })
        .collect()
}

/// One JSON hypothesis set per line.
pub fn write_hypotheses(path: &Path, sets: &BTreeMap<String, HypothesisSet>) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    let mut f = fs::File::create(path).map_err(|e| IoError::at(path, e))?;
    for set in sets.values() {
        let line = serde_json::to_string(set).map_err(|e| IoError::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| IoError::at(path, e))?;
    }
    Ok(())
}

pub fn read_hypotheses(path: &Path) -> Result<BTreeMap<String, HypothesisSet>> {
    let text = fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let set: HypothesisSet =
            serde_json::from_str(line).map_err(|e| IoError::doc(path, format!("line {}: {e}", n + 1)))?;
        set.validate().map_err(|e| IoError::doc(path, format!("line {}: {e}", n + 1)))?;
        out.insert(set.source_sample_id.clone(), set);
    }
    Ok(out)
}
