//! Event sequences, masked-event samples and their segment partition.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One event (clip) of a video: raw frames `(F, H, W, 3)` in `[0, 1]` and/or
/// precomputed per-frame embeddings `(F, D_img)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub event_id: usize,
    pub frames: Option<Tensor>,
    pub frame_features: Option<Tensor>,
    pub caption: Option<String>,
}

impl Event {
    pub fn new(
        event_id: usize,
        frames: Option<Tensor>,
        frame_features: Option<Tensor>,
        caption: Option<String>,
    ) -> Result<Self> {
        let ev = Self {
            event_id,
            frames,
            frame_features,
            caption,
        };
        ev.validate()?;
        Ok(ev)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.event_id;
        if self.frames.is_none() && self.frame_features.is_none() {
            return Err(Error::validation(format!("event {id}: neither frames nor frame_features")));
        }
        if let Some(fr) = &self.frames {
            let s = fr.shape();
            if s.len() != 4 || s[3] != 3 || s[0] == 0 {
                return Err(Error::validation(format!("event {id}: frames must be (F>=1, H, W, 3), got {s:?}")));
            }
            if fr.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::validation(format!("event {id}: pixel values outside [0, 1]")));
            }
        }
        if let Some(ft) = &self.frame_features {
            let s = ft.shape();
            if s.len() != 2 || s[0] == 0 {
                return Err(Error::validation(format!("event {id}: frame_features must be (F>=1, D), got {s:?}")));
            }
            if let Some(fr) = &self.frames {
                if fr.dim(0) != s[0] {
                    return Err(Error::validation(format!(
                        "event {id}: {} feature rows for {} frames",
                        s[0],
                        fr.dim(0)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        match (&self.frames, &self.frame_features) {
            (Some(f), _) => f.dim(0),
            (None, Some(f)) => f.dim(0),
            (None, None) => 0,
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.frame_features.as_ref().map(|f| f.dim(1))
    }

    /// `(H, W)` of the frames, if present.
    pub fn frame_hw(&self) -> Option<(usize, usize)> {
        self.frames.as_ref().map(|f| (f.dim(1), f.dim(2)))
    }
}

/// A video of `T` events with one masked explanatory event `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub events: Vec<Event>,
    pub mask_index: usize,
    pub explanation: Option<String>,
    pub split: Option<Split>,
}

impl Sample {
    pub fn new(
        sample_id: impl Into<String>,
        events: Vec<Event>,
        mask_index: usize,
        explanation: Option<String>,
        split: Option<Split>,
    ) -> Result<Self> {
        let s = Self {
            sample_id: sample_id.into(),
            events,
            mask_index,
            explanation,
            split,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.sample_id;
        if self.events.len() < 2 {
            return Err(Error::validation(format!("sample {id}: needs at least 2 events, has {}", self.events.len())));
        }
        if self.mask_index >= self.events.len() {
            return Err(Error::validation(format!(
                "sample {id}: mask_index {} out of range for {} events",
                self.mask_index,
                self.events.len()
            )));
        }
        if self.split == Some(Split::Train) && self.explanation.as_deref().map_or(true, |e| e.trim().is_empty()) {
            return Err(Error::validation(format!("sample {id}: training sample without explanation")));
        }
        for ev in &self.events {
            ev.validate()?;
        }
        let dims: Vec<usize> = self.events.iter().filter_map(Event::feature_dim).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::validation(format!("sample {id}: inconsistent feature dimensions {dims:?}")));
        }
        let hws: Vec<(usize, usize)> = self.events.iter().filter_map(Event::frame_hw).collect();
        if hws.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::validation(format!("sample {id}: inconsistent frame sizes {hws:?}")));
        }
        Ok(())
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn masked_event(&self) -> &Event {
        &self.events[self.mask_index]
    }

    /// Observed events in order (all but the masked one).
    pub fn observed(&self) -> impl Iterator<Item = &Event> {
        let m = self.mask_index;
        self.events.iter().enumerate().filter(move |(i, _)| *i != m).map(|(_, e)| e)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.events.iter().find_map(Event::feature_dim)
    }
}

/// The initial / process / final split of a sample around its masked event.
#[derive(Debug, Clone, Copy)]
pub struct SegmentPartition<'a> {
    pub initial: &'a [Event],
    pub masked: &'a Event,
    pub final_: &'a [Event],
    /// True when the masked event sits strictly inside the sequence, i.e. it
    /// plays the role of the process segment between two observed segments.
    pub process_is_mask: bool,
}

impl<'a> SegmentPartition<'a> {
    /// `initial ++ [masked] ++ final`.
    pub fn reconstruct(&self) -> Vec<&'a Event> {
        self.initial
            .iter()
            .chain(core::iter::once(self.masked))
            .chain(self.final_.iter())
            .collect()
    }
}

pub fn partition_segments(sample: &Sample) -> SegmentPartition<'_> {
    let m = sample.mask_index;
    SegmentPartition {
        initial: &sample.events[..m],
        masked: &sample.events[m],
        final_: &sample.events[m + 1..],
        process_is_mask: m > 0 && m + 1 < sample.events.len(),
    }
}

/// Per-video event annotations before masking.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub video_id: String,
    pub mask_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub entries: Vec<ManifestEntry>,
    /// Videos skipped because they had fewer than two events.
    pub skipped: Vec<String>,
}

impl SplitManifest {
    pub fn warnings(&self) -> usize {
        self.skipped.len()
    }
}

pub fn sample_id_for(video_id: &str, mask_index: usize) -> String {
    format!("{video_id}_m{mask_index}")
}

/// Turns every video with `E >= 2` events into `E` samples, each masking one
/// event (whose caption becomes the explanation) and observing the rest.
pub fn build_var_split(videos: &[VideoAnnotation], split: Split) -> Result<(Vec<Sample>, SplitManifest)> {
    let mut samples = Vec::new();
    let mut manifest = SplitManifest::default();
    for video in videos {
        if video.events.len() < 2 {
            log::warn!("skipping video {}: {} event(s)", video.video_id, video.events.len());
            manifest.skipped.push(video.video_id.clone());
            continue;
        }
        for mask_index in 0..video.events.len() {
            let explanation = video.events[mask_index].caption.clone();
            let sample_id = sample_id_for(&video.video_id, mask_index);
            let sample = Sample::new(sample_id.clone(), video.events.clone(), mask_index, explanation, Some(split))?;
            manifest.entries.push(ManifestEntry {
                sample_id,
                video_id: video.video_id.clone(),
                mask_index,
            });
            samples.push(sample);
        }
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn event(id: usize) -> Event {
        Event::new(id, None, Some(Tensor::zeros(vec![2, 4])), Some(format!("caption {id}"))).unwrap()
    }

    fn sample(t: usize, mask: usize) -> Sample {
        Sample::new("s", (0..t).map(event).collect(), mask, Some("x".to_string()), Some(Split::Train)).unwrap()
    }

    fn ids(evs: &[Event]) -> Vec<usize> {
        evs.iter().map(|e| e.event_id).collect()
    }

    #[test]
    fn partition_interior_mask() {
        let s = sample(5, 2);
        let p = partition_segments(&s);
        assert_eq!(ids(p.initial), vec![0, 1]);
        assert_eq!(ids(p.final_), vec![3, 4]);
        assert!(p.process_is_mask);
    }

    #[test]
    fn partition_boundaries() {
        let s = sample(3, 0);
        let p = partition_segments(&s);
        assert!(p.initial.is_empty());
        assert_eq!(ids(p.final_), vec![1, 2]);
        assert!(!p.process_is_mask);

        let s = sample(3, 2);
        let p = partition_segments(&s);
        assert!(p.final_.is_empty());
        assert_eq!(ids(p.initial), vec![0, 1]);
    }

    #[test]
    fn partition_reconstructs_sequence() {
        for t in 2..6 {
            for m in 0..t {
                let s = sample(t, m);
                let rebuilt: Vec<usize> = partition_segments(&s).reconstruct().iter().map(|e| e.event_id).collect();
                assert_eq!(rebuilt, (0..t).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn training_sample_requires_explanation() {
        let err = Sample::new("s", vec![event(0), event(1)], 0, None, Some(Split::Train)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(Sample::new("s", vec![event(0), event(1)], 0, None, Some(Split::Test)).is_ok());
    }

    #[test]
    fn feature_rows_must_match_frames() {
        let frames = Tensor::zeros(vec![3, 2, 2, 3]);
        let feats = Tensor::zeros(vec![2, 4]);
        assert!(matches!(Event::new(0, Some(frames), Some(feats), None), Err(Error::Validation(_))));
    }

    #[test]
    fn mask_index_out_of_range() {
        assert!(Sample::new("s", vec![event(0), event(1)], 2, Some("x".into()), None).is_err());
    }

    #[test]
    fn var_split_masks_every_event() {
        let videos = vec![
            VideoAnnotation { video_id: "a".into(), events: (0..4).map(event).collect() },
            VideoAnnotation { video_id: "b".into(), events: vec![event(0)] },
            VideoAnnotation { video_id: "c".into(), events: (0..2).map(event).collect() },
        ];
        let (samples, manifest) = build_var_split(&videos, Split::Train).unwrap();
        assert_eq!(samples.len(), 6);
        assert_eq!(manifest.warnings(), 1);
        assert_eq!(manifest.skipped, vec!["b".to_string()]);
        let masks: Vec<usize> = samples.iter().take(4).map(|s| s.mask_index).collect();
        assert_eq!(masks, vec![0, 1, 2, 3]);
        assert_eq!(samples[2].explanation.as_deref(), Some("caption 2"));
        assert_eq!(manifest.entries[5].sample_id, "c_m1");
    }
}
