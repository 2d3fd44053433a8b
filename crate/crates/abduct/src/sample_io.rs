//! Sample documents: a TOML file per sample whose events point at `AVRF`
//! tensor files by path (relative to the document).

use std::fs;
use std::path::{Path, PathBuf};

use abductive_core::data::{Event, Sample, Split, VideoAnnotation};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::tensor_io::{load_tensor, save_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventDoc {
    pub event_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleDoc {
    pub sample_id: String,
    pub num_events: usize,
    pub mask_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub events: Vec<EventDoc>,
}

pub fn parse_sample_doc(path: &Path) -> Result<SampleDoc> {
    let text = fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
    let doc: SampleDoc = toml::from_str(&text).map_err(|e| IoError::doc(path, describe(&text, &e)))?;
    if doc.num_events != doc.events.len() {
        return Err(IoError::doc(
            path,
            format!("num_events is {} but {} event blocks follow", doc.num_events, doc.events.len()),
        ));
    }
    Ok(doc)
}

/// Parser message prefixed with the key on the offending line, if any.
fn describe(text: &str, e: &toml::de::Error) -> String {
    let key = e.span().and_then(|span| {
        let start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
        let line = text[start..].lines().next()?;
        let (k, _) = line.split_once('=')?;
        Some(k.trim().to_string())
    });
    match key {
        Some(k) => format!("field `{k}`: {}", e.message()),
        None => e.message().to_string(),
    }
}

/// Reads and validates a sample, resolving tensor paths against the
/// document's directory.
pub fn load_sample(path: &Path) -> Result<Sample> {
    let doc = parse_sample_doc(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut events = Vec::with_capacity(doc.events.len());
    for e in &doc.events {
        let load = |p: &Option<String>| p.as_ref().map(|p| load_tensor(&base.join(p))).transpose();
        let ev = Event::new(e.event_id, load(&e.frames_path)?, load(&e.features_path)?, e.caption.clone())
            .map_err(|err| IoError::doc(path, format!("event {}: {err}", e.event_id)))?;
        events.push(ev);
    }
    Sample::new(doc.sample_id, events, doc.mask_index, doc.explanation, doc.split).map_err(|err| IoError::doc(path, err.to_string()))
}

pub fn write_sample_doc(path: &Path, doc: &SampleDoc) -> Result<()> {
    let text = toml::to_string(doc).map_err(|e| IoError::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| IoError::at(path, e))
}

/// Document for `sample` whose event tensors live at the given relative
/// paths (`None` where the event has no such tensor).
pub fn doc_for(sample: &Sample, paths: &[(Option<String>, Option<String>)]) -> SampleDoc {
    SampleDoc {
        sample_id: sample.sample_id.clone(),
        num_events: sample.events.len(),
        mask_index: sample.mask_index,
        explanation: sample.explanation.clone(),
        split: sample.split,
        events: sample
            .events
            .iter()
            .zip(paths)
            .map(|(e, (features, frames))| EventDoc {
                event_id: e.event_id,
                caption: e.caption.clone(),
                features_path: features.clone(),
                frames_path: frames.clone(),
            })
            .collect(),
    }
}

/// Writes `{dir}/{sample_id}.toml` with tensors under `{dir}/{sample_id}/`.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<PathBuf> {
    let tdir = dir.join(&sample.sample_id);
    fs::create_dir_all(&tdir).map_err(|e| IoError::at(&tdir, e))?;
    let mut paths = Vec::with_capacity(sample.events.len());
    for (i, e) in sample.events.iter().enumerate() {
        let save = |t: &Option<abductive_core::Tensor>, kind: &str| -> Result<Option<String>> {
            let Some(t) = t else { return Ok(None) };
            let rel = format!("{}/e{i}.{kind}.avrf", sample.sample_id);
            save_tensor(&dir.join(&rel), t)?;
            Ok(Some(rel))
        };
        paths.push((save(&e.frame_features, "features")?, save(&e.frames, "frames")?));
    }
    let path = dir.join(format!("{}.toml", sample.sample_id));
    write_sample_doc(&path, &doc_for(sample, &paths))?;
    Ok(path)
}

/// Annotation of one unmasked video, the input of dataset ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoDoc {
    pub video_id: String,
    pub events: Vec<EventDoc>,
}

/// Reads a video document; tensor paths resolve against its directory.
pub fn load_video(path: &Path) -> Result<VideoAnnotation> {
    let text = fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
    let doc: VideoDoc = toml::from_str(&text).map_err(|e| IoError::doc(path, describe(&text, &e)))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut events = Vec::with_capacity(doc.events.len());
    for e in &doc.events {
        let load = |p: &Option<String>| p.as_ref().map(|p| load_tensor(&base.join(p))).transpose();
        let ev = Event::new(e.event_id, load(&e.frames_path)?, load(&e.features_path)?, e.caption.clone())
            .map_err(|err| IoError::doc(path, format!("event {}: {err}", e.event_id)))?;
        events.push(ev);
    }
    Ok(VideoAnnotation {
        video_id: doc.video_id,
        events,
    })
}

/// Writes `{dir}/{video_id}.toml` with tensors under `{dir}/{video_id}/`.
pub fn save_video(dir: &Path, video: &VideoAnnotation) -> Result<PathBuf> {
    let tdir = dir.join(&video.video_id);
    fs::create_dir_all(&tdir).map_err(|e| IoError::at(&tdir, e))?;
    let mut events = Vec::with_capacity(video.events.len());
    for (i, e) in video.events.iter().enumerate() {
        let save = |t: &Option<abductive_core::Tensor>, kind: &str| -> Result<Option<String>> {
            let Some(t) = t else { return Ok(None) };
            let rel = format!("{}/e{i}.{kind}.avrf", video.video_id);
            save_tensor(&dir.join(&rel), t)?;
            Ok(Some(rel))
        };
        events.push(EventDoc {
            event_id: e.event_id,
            caption: e.caption.clone(),
            features_path: save(&e.frame_features, "features")?,
            frames_path: save(&e.frames, "frames")?,
        });
    }
    let doc = VideoDoc {
        video_id: video.video_id.clone(),
        events,
    };
    let path = dir.join(format!("{}.toml", video.video_id));
    let text = toml::to_string(&doc).map_err(|e| IoError::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| IoError::at(&path, e))?;
    Ok(path)
}
