//! A small procedural world for end-to-end runs without external data.
//!
//! Each video follows one fixed script of verbs applied to a single object
//! ("take the egg", "wash the egg", "cut the egg", ...). Frames encode the
//! verb as a colour and the object as a stripe pattern; frame features are
//! the caption featurization plus noise, so image and text share one space.
//! [`ScriptedLlm`] stands in for the language model: it knows the scripts
//! and answers the candidate, negative and caption prompts from them.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::data::{build_var_split, Event, Sample, Split, SplitManifest, VideoAnnotation};
use crate::error::Result;
use crate::hypothesis::{ChatClient, ChatRequest, ClientError, MASK_TOKEN};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::text::{fnv1a, TextFeaturizer};

pub const SCRIPT_LEN: usize = 6;

pub const SCRIPTS: [[&str; SCRIPT_LEN]; 8] = [
    ["take", "wash", "cut", "fry", "season", "serve"],
    ["open", "fold", "pack", "tape", "close", "carry"],
    ["find", "clean", "sand", "paint", "dry", "hang"],
    ["fill", "boil", "stir", "pour", "drink", "rinse"],
    ["unlock", "sweep", "mop", "dust", "polish", "lock"],
    ["pick", "sort", "weigh", "bag", "price", "sell"],
    ["plant", "water", "prune", "harvest", "wrap", "store"],
    ["fetch", "load", "aim", "throw", "catch", "drop"],
];

pub const OBJECTS: [&str; 10] = ["onion", "bread", "egg", "fish", "apple", "shirt", "box", "cup", "ball", "plate"];

pub const PLACES: [&str; 6] = ["kitchen", "garden", "garage", "office", "yard", "hall"];

pub fn caption(verb: &str, object: &str, place: &str) -> String {
    format!("they {verb} the {object} in the {place}")
}

/// `(script, verb position)` of a known verb.
pub fn locate_verb(verb: &str) -> Option<(usize, usize)> {
    SCRIPTS
        .iter()
        .enumerate()
        .find_map(|(s, vs)| vs.iter().position(|v| *v == verb).map(|p| (s, p)))
}

/// Splits "they verb the object in the place" into `(verb, object, place)`.
pub fn parse_caption(text: &str) -> Option<(&str, &str, &str)> {
    let w: Vec<&str> = text.split_whitespace().collect();
    match w.as_slice() {
        ["they", v, "the", o, "in", "the", p] => Some((v, o, p)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub frame_hw: usize,
    pub frames_per_event: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub pixel_noise: f64,
    pub feature_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_hw: 16,
            frames_per_event: 2,
            min_events: 3,
            max_events: 5,
            pixel_noise: 0.03,
            feature_noise: 0.05,
        }
    }
}

fn verb_colour(script: usize, pos: usize) -> [f64; 3] {
    let h = (script * SCRIPT_LEN + pos) as f64 / (SCRIPTS.len() * SCRIPT_LEN) as f64;
    let frac = |x: f64| x - libm::floor(x);
    [0.2 + 0.7 * h, 0.2 + 0.7 * frac(3.0 * h + 0.33), 0.2 + 0.7 * frac(7.0 * h + 0.66)]
}

/// `(F, H, W, 3)` frames for one event.
pub fn render_event(cfg: &WorldConfig, script: usize, pos: usize, object: usize, rng: &mut Rng64) -> Tensor {
    let (n, f) = (cfg.frame_hw, cfg.frames_per_event);
    let colour = verb_colour(script, pos);
    let period = object + 2;
    let mut data = Vec::with_capacity(f * n * n * 3);
    for fi in 0..f {
        for y in 0..n {
            let stripe = if ((y + fi) / period) % 2 == 0 { 1.0 } else { 0.55 };
            for _x in 0..n {
                for c in colour {
                    data.push((c * stripe + cfg.pixel_noise * rng.normal()).clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::from_parts(vec![f, n, n, 3], data)
}

/// `(F, D)` features: the caption featurization plus Gaussian noise.
pub fn event_features(cfg: &WorldConfig, featurizer: &dyn TextFeaturizer, text: &str, rng: &mut Rng64) -> Tensor {
    let base = featurizer.featurize(text);
    let d = base.len();
    let mut data = Vec::with_capacity(cfg.frames_per_event * d);
    for _ in 0..cfg.frames_per_event {
        data.extend(base.iter().map(|v| v + cfg.feature_noise * rng.normal()));
    }
    Tensor::from_parts(vec![cfg.frames_per_event, d], data)
}

/// One video: consecutive verbs of a random script on a random object.
pub fn generate_video(
    cfg: &WorldConfig,
    featurizer: &dyn TextFeaturizer,
    video_id: &str,
    rng: &mut Rng64,
) -> Result<VideoAnnotation> {
    let script = rng.below(SCRIPTS.len());
    let object = rng.below(OBJECTS.len());
    let place = PLACES[rng.below(PLACES.len())];
    let len = cfg.min_events + rng.below(cfg.max_events - cfg.min_events + 1);
    let start = rng.below(SCRIPT_LEN - len + 1);
    let mut events = Vec::with_capacity(len);
    for i in 0..len {
        let pos = start + i;
        let text = caption(SCRIPTS[script][pos], OBJECTS[object], place);
        let frames = render_event(cfg, script, pos, object, rng);
        let feats = event_features(cfg, featurizer, &text, rng);
        events.push(Event::new(i, Some(frames), Some(feats), Some(text))?);
    }
    Ok(VideoAnnotation {
        video_id: video_id.to_string(),
        events,
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub videos: Vec<VideoAnnotation>,
    pub samples: Vec<Sample>,
    pub manifest: SplitManifest,
}

/// `videos` videos, every mask position of each becoming a sample.
pub fn generate_split(
    cfg: &WorldConfig,
    featurizer: &dyn TextFeaturizer,
    split: Split,
    videos: usize,
    seed: u64,
) -> Result<SyntheticSplit> {
    let mut rng = Rng64::stream(seed, 0x5E + split as u64);
    let videos: Vec<VideoAnnotation> = (0..videos)
        .map(|i| generate_video(cfg, featurizer, &format!("{}{i:04}", split.as_str()), &mut rng))
        .collect::<Result<_>>()?;
    let (samples, manifest) = build_var_split(&videos, split)?;
    Ok(SyntheticSplit {
        videos,
        samples,
        manifest,
    })
}

/// Observed captions of a sample in order.
pub fn observed_captions(sample: &Sample) -> Vec<String> {
    sample.observed().map(|e| e.caption.clone().unwrap_or_default()).collect()
}

/// Deterministic stand-in for the language model. Replies depend on the
/// seed, the request and a call counter.
#[derive(Debug)]
pub struct ScriptedLlm {
    pub seed: u64,
    /// Chance that a candidate reply is the script-consistent event.
    pub p_correct: f64,
    calls: AtomicU64,
}

impl ScriptedLlm {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            p_correct: 0.35,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn rng_for(&self, req: &ChatRequest) -> Rng64 {
        let n = self.calls.fetch_add(1, Ordering::Relaxed);
        Rng64::stream(fnv1a(req.canonical().as_bytes(), self.seed), n)
    }
}

/// Numbered lines "k. text" of a prompt.
fn numbered_lines(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .filter_map(|l| {
            let (num, rest) = l.split_once(". ")?;
            num.chars().all(|c| c.is_ascii_digit()).then_some(rest.trim())
        })
        .collect()
}

/// Script, implied script position of the masked slot, object and place,
/// read off the first parseable observed caption.
fn infer_masked<'a>(lines: &[&'a str]) -> Option<(usize, usize, usize, &'a str)> {
    let mask = lines.iter().position(|l| *l == MASK_TOKEN)?;
    for (i, l) in lines.iter().enumerate() {
        if i == mask {
            continue;
        }
        let (v, o, place) = parse_caption(l)?;
        let (s, p) = locate_verb(v)?;
        let obj = OBJECTS.iter().position(|x| *x == o)?;
        let pos = p as isize + mask as isize - i as isize;
        if !(0..SCRIPT_LEN as isize).contains(&pos) {
            return None;
        }
        return Some((s, pos as usize, obj, place));
    }
    None
}

fn random_event(rng: &mut Rng64) -> String {
    let s = rng.below(SCRIPTS.len());
    caption(
        SCRIPTS[s][rng.below(SCRIPT_LEN)],
        OBJECTS[rng.below(OBJECTS.len())],
        PLACES[rng.below(PLACES.len())],
    )
}

impl ChatClient for ScriptedLlm {
    fn model_name(&self) -> &str {
        "scripted-llm"
    }

    fn complete(&self, req: &ChatRequest) -> core::result::Result<String, ClientError> {
        let prompt = req
            .messages
            .last()
            .map(|m| m.content.as_str())
            .ok_or_else(|| ClientError::Malformed("empty request".into()))?;
        let mut rng = self.rng_for(req);
        if let Some(rest) = prompt.split("Positive sample: ").nth(1) {
            let positive = rest.lines().next().unwrap_or("").trim();
            let Some((v, o, place)) = parse_caption(positive) else {
                return Ok(random_event(&mut rng));
            };
            let (s, p) = locate_verb(v).unwrap_or((0, 0));
            let obj = OBJECTS.iter().position(|x| *x == o).unwrap_or(0);
            // Hard negatives stay inside the script and the place: another
            // verb, another object, or both.
            let other_verb = |rng: &mut Rng64| SCRIPTS[s][(p + 1 + rng.below(SCRIPT_LEN - 1)) % SCRIPT_LEN];
            let other_obj = |rng: &mut Rng64| OBJECTS[(obj + 1 + rng.below(OBJECTS.len() - 1)) % OBJECTS.len()];
            let reply = match rng.below(3) {
                0 => caption(other_verb(&mut rng), OBJECTS[obj], place),
                1 => caption(SCRIPTS[s][p], other_obj(&mut rng), place),
                _ => {
                    let v = other_verb(&mut rng);
                    caption(v, other_obj(&mut rng), place)
                }
            };
            return Ok(reply);
        }
        if prompt.contains(MASK_TOKEN) {
            let lines = numbered_lines(prompt);
            let Some((s, pos, obj, place)) = infer_masked(&lines) else {
                return Ok(random_event(&mut rng));
            };
            let reply = if rng.chance(self.p_correct) {
                caption(SCRIPTS[s][pos], OBJECTS[obj], place)
            } else if rng.chance(0.6) {
                caption(SCRIPTS[s][rng.below(SCRIPT_LEN)], OBJECTS[obj], place)
            } else {
                random_event(&mut rng)
            };
            return Ok(reply);
        }
        Ok("someone handles an object".to_string())
    }
}
