//! Candidate and negative hypothesis generation through a chat-completion
//! client.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Event;
use crate::error::{Error, Result};
use crate::text::normalize;

pub const PROMPT_VERSION: &str = "v1";
pub const CAPTION_TEMPLATE: &str = include_str!("../prompts/caption.v1.txt");
pub const CANDIDATES_TEMPLATE: &str = include_str!("../prompts/candidates.v1.txt");
pub const NEGATIVES_TEMPLATE: &str = include_str!("../prompts/negatives.v1.txt");

pub const MASK_TOKEN: &str = "[MASK]";
pub const DEFAULT_CANDIDATES: usize = 10;
pub const DEFAULT_TEMPERATURE: f64 = 1.4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("fixture exhausted after {0} replies")]
    FixtureExhausted(usize),
    #[error("fixture digest mismatch at entry {index}")]
    FixtureMismatch { index: usize },
    #[error("{0}")]
    Recorded(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub n: u32,
}

impl ChatRequest {
    pub fn user(model: &str, content: String, temperature: f64) -> Self {
        Self {
            model: model.to_string(),
            messages: alloc::vec![ChatMessage { role: Role::User, content }],
            temperature,
            n: 1,
        }
    }

    /// Canonical text used for fixture digests: model, temperature and the
    /// messages, one per line.
    pub fn canonical(&self) -> String {
        let mut s = format!("model={}\ntemperature={}\nn={}\n", self.model, self.temperature, self.n);
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            s.push_str(&format!("{role}: {}\n", m.content));
        }
        s
    }
}

/// A chat-completion backend. Implementations must be safe to share across
/// threads; a mock implementation replays recorded replies.
pub trait ChatClient: Send + Sync {
    fn model_name(&self) -> &str;

    /// Returns the text of the first choice.
    fn complete(&self, request: &ChatRequest) -> core::result::Result<String, ClientError>;

    fn max_retries(&self) -> u32 {
        0
    }
}

fn complete_with_retries(client: &dyn ChatClient, req: &ChatRequest) -> core::result::Result<String, ClientError> {
    let mut attempt = 0;
    loop {
        match client.complete(req) {
            Ok(text) => return Ok(text),
            Err(e) if attempt >= client.max_retries() => return Err(e),
            Err(e) => {
                log::debug!("retrying after client error: {e}");
                attempt += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Candidate,
    Negative,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub source_sample_id: String,
    pub hypotheses: Vec<Hypothesis>,
}

impl HypothesisSet {
    pub fn new(source_sample_id: impl Into<String>) -> Self {
        Self {
            source_sample_id: source_sample_id.into(),
            hypotheses: Vec::new(),
        }
    }

    pub fn push(&mut self, text: impl Into<String>, provenance: Provenance, score: Option<f64>) -> Result<()> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::validation("hypothesis text is empty"));
        }
        if provenance == Provenance::GroundTruth
            && self.hypotheses.iter().any(|h| h.provenance == Provenance::GroundTruth)
        {
            return Err(Error::validation("hypothesis set already has a ground-truth entry"));
        }
        self.hypotheses.push(Hypothesis { text, provenance, score });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut check = HypothesisSet::new(self.source_sample_id.clone());
        for h in &self.hypotheses {
            check.push(h.text.clone(), h.provenance, h.score)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.hypotheses.iter().map(|h| h.text.as_str()).collect()
    }
}

/// Generation output plus whether fewer distinct texts than requested were
/// obtained before the retry budget ran out.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub set: HypothesisSet,
    pub deficient: bool,
    pub queries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub count: usize,
    pub temperature: f64,
    /// Extra queries allowed beyond `count`; defaults to `3 * count`.
    pub retry_budget: Option<usize>,
}

impl GenerationConfig {
    pub fn new(count: usize, temperature: f64) -> Self {
        Self {
            count,
            temperature,
            retry_budget: None,
        }
    }

    fn budget(&self) -> usize {
        self.count + self.retry_budget.unwrap_or(3 * self.count)
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Renders the observed captions one per line, 1-based, with the mask token
/// inserted at `mask_index`.
pub fn render_masked_events(captions: &[String], mask_index: usize) -> String {
    let mut lines = Vec::with_capacity(captions.len() + 1);
    let mut it = captions.iter();
    for pos in 0..=captions.len() {
        let text = if pos == mask_index {
            MASK_TOKEN
        } else {
            match it.next() {
                Some(c) => c.as_str(),
                None => break,
            }
        };
        lines.push(format!("{}. {}", pos + 1, text));
    }
    lines.join("\n")
}

pub fn candidates_prompt(captions: &[String], mask_index: usize) -> String {
    fill(CANDIDATES_TEMPLATE, &[("events", &render_masked_events(captions, mask_index))])
}

pub fn negatives_prompt(positive: &str, captions: &[String]) -> String {
    let events: Vec<String> = captions.iter().enumerate().map(|(i, c)| format!("{}. {c}", i + 1)).collect();
    fill(NEGATIVES_TEMPLATE, &[("positive", positive), ("events", &events.join("\n"))])
}

pub fn caption_prompt(event_id: usize) -> String {
    fill(CAPTION_TEMPLATE, &[("index", &(event_id + 1).to_string())])
}

/// Strips whitespace, surrounding quotes and a leading list marker.
pub fn clean_reply(reply: &str) -> String {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let mut s = line.trim_start_matches(|c: char| c == '-' || c == '*').trim_start();
    if let Some(pos) = s.find(". ") {
        if pos > 0 && s[..pos].chars().all(|c| c.is_ascii_digit()) {
            s = &s[pos + 2..];
        }
    }
    s.trim().trim_matches(|c| c == '"' || c == '\'').trim().to_string()
}

/// One caption per observed event; pre-supplied captions pass through.
pub fn caption_events(observations: &[&Event], captioner: Option<&dyn ChatClient>) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(observations.len());
    for ev in observations {
        if let Some(c) = &ev.caption {
            out.push(c.clone());
            continue;
        }
        let Some(client) = captioner else {
            return Err(Error::precondition(format!("event {} has no caption and no captioner", ev.event_id)));
        };
        let req = ChatRequest::user(client.model_name(), caption_prompt(ev.event_id), 0.0);
        let text = complete_with_retries(client, &req).map_err(|source| Error::Caption {
            index: ev.event_id,
            source,
        })?;
        out.push(clean_reply(&text));
    }
    Ok(out)
}

fn collect_distinct(
    client: &dyn ChatClient,
    prompt: &str,
    cfg: &GenerationConfig,
    sample_id: &str,
    provenance: Provenance,
    reject: Option<&str>,
) -> Result<Generated> {
    if cfg.temperature <= 0.0 {
        return Err(Error::precondition("temperature must be > 0"));
    }
    let mut set = HypothesisSet::new(sample_id);
    let mut seen = BTreeSet::new();
    let rejected = reject.map(normalize);
    let mut queries = 0;
    while set.len() < cfg.count && queries < cfg.budget() {
        queries += 1;
        let req = ChatRequest::user(client.model_name(), prompt.to_string(), cfg.temperature);
        let text = clean_reply(&complete_with_retries(client, &req)?);
        if text.is_empty() {
            continue;
        }
        let key = normalize(&text);
        if rejected.as_deref() == Some(key.as_str()) || !seen.insert(key) {
            continue;
        }
        set.push(text, provenance, None)?;
    }
    let deficient = set.len() < cfg.count;
    if deficient {
        log::warn!("{sample_id}: {} of {} distinct hypotheses after {queries} queries", set.len(), cfg.count);
    }
    Ok(Generated { set, deficient, queries })
}

/// Queries the client for `cfg.count` distinct candidate explanations of the
/// masked event.
pub fn generate_candidates(
    sample_id: &str,
    captions: &[String],
    mask_index: usize,
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
) -> Result<Generated> {
    if cfg.count == 0 {
        return Err(Error::precondition("candidate count must be >= 1"));
    }
    if mask_index > captions.len() {
        return Err(Error::precondition(format!(
            "mask index {mask_index} out of range for {} observed captions",
            captions.len()
        )));
    }
    let prompt = candidates_prompt(captions, mask_index);
    collect_distinct(client, &prompt, cfg, sample_id, Provenance::Candidate, None)
}

/// Queries the client for `cfg.count` distinct negatives; replies equal to
/// the positive are rejected.
pub fn generate_negatives(
    sample_id: &str,
    positive: &str,
    captions: &[String],
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
) -> Result<Generated> {
    if cfg.count == 0 {
        return Ok(Generated {
            set: HypothesisSet::new(sample_id),
            deficient: false,
            queries: 0,
        });
    }
    let prompt = negatives_prompt(positive, captions);
    collect_distinct(client, &prompt, cfg, sample_id, Provenance::Negative, Some(positive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use core::cell::Cell;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<core::result::Result<String, ClientError>>>,
        calls: Mutex<Vec<ChatRequest>>,
        retries: u32,
    }

    impl Scripted {
        fn new(replies: Vec<&str>) -> Self {
            Self {
                replies: Mutex::new(replies.into_iter().rev().map(|s| Ok(s.to_string())).collect()),
                calls: Mutex::new(Vec::new()),
                retries: 0,
            }
        }
    }

    impl ChatClient for Scripted {
        fn model_name(&self) -> &str {
            "scripted"
        }
        fn complete(&self, request: &ChatRequest) -> core::result::Result<String, ClientError> {
            self.calls.lock().unwrap().push(request.clone());
            self.replies.lock().unwrap().pop().unwrap_or(Err(ClientError::FixtureExhausted(0)))
        }
        fn max_retries(&self) -> u32 {
            self.retries
        }
    }

    struct Constant(&'static str, Cell<usize>);
    unsafe impl Sync for Constant {}
    impl ChatClient for Constant {
        fn model_name(&self) -> &str {
            "constant"
        }
        fn complete(&self, _: &ChatRequest) -> core::result::Result<String, ClientError> {
            self.1.set(self.1.get() + 1);
            Ok(self.0.to_string())
        }
    }

    fn caps(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ten_distinct_candidates_at_high_temperature() {
        let replies: Vec<String> = (0..10).map(|i| format!("hypothesis number {i}")).collect();
        let client = Scripted::new(replies.iter().map(String::as_str).collect());
        let g = generate_candidates("s", &caps(&["a", "b"]), 1, &client, &GenerationConfig::new(10, 1.4)).unwrap();
        assert_eq!(g.set.len(), 10);
        assert!(!g.deficient);
        let calls = client.calls.lock().unwrap();
        assert!(calls.iter().all(|r| r.temperature == 1.4));
        assert!(calls[0].messages[0].content.contains("1. a\n2. [MASK]\n3. b"));
    }

    #[test]
    fn repeated_reply_is_deficient() {
        let client = Constant("same thing", Cell::new(0));
        let cfg = GenerationConfig { count: 5, temperature: 1.0, retry_budget: Some(3) };
        let g = generate_candidates("s", &caps(&["a"]), 0, &client, &cfg).unwrap();
        assert_eq!(g.set.len(), 1);
        assert!(g.deficient);
        assert_eq!(client.1.get(), 8);
    }

    #[test]
    fn dedup_is_whitespace_and_case_insensitive() {
        let client = Scripted::new(vec!["Cut  the onion", "cut the onion", "fry it"]);
        let g = generate_candidates("s", &caps(&["a"]), 1, &client, &GenerationConfig::new(2, 1.0)).unwrap();
        assert_eq!(g.set.texts(), vec!["Cut  the onion", "fry it"]);
    }

    #[test]
    fn negatives_reject_positive() {
        let client = Scripted::new(vec!["add salt", "Add salt ", "stir the pot"]);
        let g = generate_negatives("s", "add salt", &caps(&["a"]), &client, &GenerationConfig::new(1, 1.0)).unwrap();
        assert_eq!(g.set.texts(), vec!["stir the pot"]);
        assert_eq!(g.set.hypotheses[0].provenance, Provenance::Negative);
        let prompt = &client.calls.lock().unwrap()[0].messages[0].content;
        assert!(prompt.contains("Positive sample: add salt"));
    }

    #[test]
    fn zero_negatives_is_empty() {
        let client = Constant("x", Cell::new(0));
        let g = generate_negatives("s", "p", &[], &client, &GenerationConfig::new(0, 1.0)).unwrap();
        assert!(g.set.is_empty());
        assert_eq!(client.1.get(), 0);
    }

    #[test]
    fn captions_pass_through_and_errors_name_event() {
        let e0 = Event::new(0, None, Some(crate::Tensor::zeros(vec![1, 2])), Some("first".into())).unwrap();
        let e2 = Event::new(2, None, Some(crate::Tensor::zeros(vec![1, 2])), None).unwrap();
        assert_eq!(caption_events(&[&e0], None).unwrap(), vec!["first".to_string()]);

        let client = Scripted {
            replies: Mutex::new(vec![Err(ClientError::Timeout)]),
            calls: Mutex::new(Vec::new()),
            retries: 0,
        };
        match caption_events(&[&e0, &e2], Some(&client)) {
            Err(Error::Caption { index, source }) => {
                assert_eq!(index, 2);
                assert_eq!(source, ClientError::Timeout);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retries_recover_from_transient_errors() {
        let client = Scripted {
            replies: Mutex::new(vec![Ok("ok".into()), Err(ClientError::Timeout)]),
            calls: Mutex::new(Vec::new()),
            retries: 1,
        };
        let e = Event::new(4, None, Some(crate::Tensor::zeros(vec![1, 2])), None).unwrap();
        assert_eq!(caption_events(&[&e], Some(&client)).unwrap(), vec!["ok".to_string()]);
    }

    #[test]
    fn clean_reply_strips_markers() {
        assert_eq!(clean_reply("  1. \"Whisk the eggs\"\nextra"), "Whisk the eggs");
        assert_eq!(clean_reply("- pour water"), "pour water");
    }

    #[test]
    fn single_ground_truth() {
        let mut s = HypothesisSet::new("s");
        s.push("a", Provenance::GroundTruth, None).unwrap();
        assert!(s.push("b", Provenance::GroundTruth, None).is_err());
        assert!(s.push(" ", Provenance::Candidate, None).is_err());
    }
}
