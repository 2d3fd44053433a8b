//! Run configuration: one TOML document, every field optional, with
//! command-line overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use abductive_core::contrast::{ContrastConfig, DEFAULT_K, DEFAULT_TAU};
use abductive_core::hypothesis::{DEFAULT_CANDIDATES, DEFAULT_TEMPERATURE};
use abductive_core::imaginer::{DiffusionConfig, ImaginerConfig, UNetConfig, DEFAULT_M_LOCAL};
use abductive_core::optim::AdamWConfig;
use abductive_core::reasoner::ReasonerConfig;
use abductive_core::training::{Stage, TrainPlan, DEFAULT_ALPHA};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::llm::HttpClientConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset_root: PathBuf,
    pub run_dir: PathBuf,
    /// Fixture replayed instead of the live client when set.
    pub fixture: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset_root: "data".into(),
            run_dir: "runs/default".into(),
            fixture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypothesisConfig {
    /// Candidates requested per sample (L).
    pub candidates: usize,
    pub temperature: f64,
    /// Hard negatives per positive (M).
    pub negatives: usize,
    pub negative_temperature: f64,
    /// Top-k hypotheses handed to the reasoner.
    pub k: usize,
    /// Feed the selected hypotheses to the reasoner at all.
    pub enabled: bool,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self {
            candidates: DEFAULT_CANDIDATES,
            temperature: DEFAULT_TEMPERATURE,
            negatives: 100,
            negative_temperature: 1.0,
            k: DEFAULT_K,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastSection {
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub d_joint: usize,
    pub d_model: usize,
    pub heads: usize,
    pub text_hidden: usize,
}

impl Default for ContrastSection {
    fn default() -> Self {
        let c = ContrastConfig::default();
        Self {
            tau: DEFAULT_TAU,
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            d_joint: c.d_joint,
            d_model: c.d_model,
            heads: c.heads,
            text_hidden: c.text_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_frames: usize,
    pub max_prompt_tokens: usize,
    pub max_target_tokens: usize,
    /// Placeholder frames for the masked event; unset means the mean length
    /// of the observed events.
    pub placeholder_len: Option<usize>,
}

impl Default for ReasonerSection {
    fn default() -> Self {
        let r = ReasonerConfig::new(0, None);
        Self {
            vocab_size: 512,
            d_model: r.d_model,
            heads: r.heads,
            layers: r.enc_layers,
            max_frames: r.max_frames,
            max_prompt_tokens: r.max_prompt_tokens,
            max_target_tokens: r.max_target_tokens,
            placeholder_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImaginerSection {
    /// Local frames in the hybrid visual condition (m).
    pub m_local: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub latent_hw: usize,
    pub d_text: usize,
    pub d_visual: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gamma_snr: f64,
    pub latent_frames: usize,
    pub bridge_hidden: usize,
}

impl Default for ImaginerSection {
    fn default() -> Self {
        let u = UNetConfig::default();
        let d = DiffusionConfig::default();
        Self {
            m_local: DEFAULT_M_LOCAL,
            latent_channels: u.latent_channels,
            base_channels: u.base_channels,
            latent_hw: u.latent_hw,
            d_text: u.d_text,
            d_visual: u.d_visual,
            groups: u.groups,
            time_dim: u.time_dim,
            timesteps: d.timesteps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            gamma_snr: d.gamma_snr,
            latent_frames: d.latent_frames,
            bridge_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub alpha: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    pub grad_accum: usize,
    pub max_steps: Option<usize>,
    pub use_imaginer: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            stage1_epochs: 2,
            stage2_epochs: 1,
            stage1_lr: 1e-4,
            stage2_lr: 1e-5,
            weight_decay: AdamWConfig::default().weight_decay,
            grad_accum: 1,
            max_steps: None,
            use_imaginer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    /// OpenAI-style chat-completion endpoint.
    #[default]
    Http,
    /// Offline stand-in that answers from the synthetic world's scripts.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub provider: Provider,
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        let h = HttpClientConfig::default();
        Self {
            provider: Provider::Http,
            base_url: h.base_url,
            model: h.model,
            timeout_secs: h.timeout_secs,
            max_retries: h.max_retries,
            backoff_ms: h.backoff_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train_videos: usize,
    pub test_videos: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train_videos: 30,
            test_videos: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Width of the hashed text features.
    pub text_dim: usize,
    /// Seed of the text featurizer; it stands in for a frozen backbone, so
    /// it is kept apart from the run seed.
    pub text_seed: u64,
    pub paths: PathsConfig,
    pub hypotheses: HypothesisConfig,
    pub contrast: ContrastSection,
    pub reasoner: ReasonerSection,
    pub imaginer: ImaginerSection,
    pub training: TrainingSection,
    pub llm: LlmSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            text_dim: 32,
            text_seed: 0,
            paths: PathsConfig::default(),
            hypotheses: HypothesisConfig::default(),
            contrast: ContrastSection::default(),
            reasoner: ReasonerSection::default(),
            imaginer: ImaginerSection::default(),
            training: TrainingSection::default(),
            llm: LlmSection::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads and validates `path`; relative paths inside the file resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|m| IoError::doc(path, m))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.dataset_root = base.join(&cfg.paths.dataset_root);
        cfg.paths.run_dir = base.join(&cfg.paths.run_dir);
        cfg.paths.fixture = cfg.paths.fixture.map(|f| base.join(f));
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.run_dir {
            self.paths.run_dir = d.clone();
        }
        if let Some(f) = &o.fixture {
            self.paths.fixture = Some(f.clone());
        }
        if let Some(k) = o.k {
            self.hypotheses.k = k;
        }
        if let Some(a) = o.alpha {
            self.training.alpha = a;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IoError::Config(m.to_string()));
        let h = &self.hypotheses;
        if h.k == 0 || h.candidates == 0 || h.negatives == 0 {
            return bad("hypotheses.k, candidates and negatives must be >= 1");
        }
        if !(h.temperature > 0.0 && h.negative_temperature > 0.0) {
            return bad("hypothesis temperatures must be > 0");
        }
        if !(self.training.alpha > 0.0) {
            return bad("training.alpha must be > 0");
        }
        if self.training.grad_accum == 0 || self.training.stage1_epochs == 0 || self.training.stage2_epochs == 0 {
            return bad("training epochs and grad_accum must be >= 1");
        }
        if self.text_dim == 0 || self.reasoner.vocab_size < 8 {
            return bad("text_dim must be >= 1 and reasoner.vocab_size >= 8");
        }
        if self.reasoner.layers == 0 || self.reasoner.d_model % self.reasoner.heads.max(1) != 0 {
            return bad("reasoner.d_model must be divisible by reasoner.heads and layers >= 1");
        }
        if self.imaginer.m_local == 0 {
            return bad("imaginer.m_local must be >= 1");
        }
        if self.reasoner.placeholder_len == Some(0) {
            return bad("reasoner.placeholder_len must be >= 1");
        }
        self.contrast_config().validate()?;
        self.imaginer_config().unet.validate()?;
        Ok(())
    }

    pub fn contrast_config(&self) -> ContrastConfig {
        let c = &self.contrast;
        ContrastConfig {
            tau: c.tau,
            negatives_per_positive: self.hypotheses.negatives,
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            seed: self.seed,
            d_joint: c.d_joint,
            d_model: c.d_model,
            heads: c.heads,
            text_hidden: c.text_hidden,
        }
    }

    pub fn reasoner_config(&self, vocab_size: usize, d_img: Option<usize>) -> ReasonerConfig {
        let r = &self.reasoner;
        let mut rc = ReasonerConfig::new(vocab_size, d_img);
        rc.d_model = r.d_model;
        rc.heads = r.heads;
        rc.enc_layers = r.layers;
        rc.dec_layers = r.layers;
        rc.max_frames = r.max_frames;
        rc.max_prompt_tokens = r.max_prompt_tokens;
        rc.max_target_tokens = r.max_target_tokens;
        rc
    }

    pub fn imaginer_config(&self) -> ImaginerConfig {
        let i = &self.imaginer;
        ImaginerConfig {
            unet: UNetConfig {
                latent_channels: i.latent_channels,
                base_channels: i.base_channels,
                latent_hw: i.latent_hw,
                d_text: i.d_text,
                d_visual: i.d_visual,
                groups: i.groups,
                time_dim: i.time_dim,
                ..UNetConfig::default()
            },
            diffusion: DiffusionConfig {
                timesteps: i.timesteps,
                beta_start: i.beta_start,
                beta_end: i.beta_end,
                gamma_snr: i.gamma_snr,
                latent_frames: i.latent_frames,
            },
            m_local: i.m_local,
        }
    }

    pub fn train_plan(&self, stage: Stage, tag: u64) -> TrainPlan {
        let t = &self.training;
        let mut p = TrainPlan::new(stage, self.seed ^ tag);
        let (epochs, lr) = match stage {
            Stage::IIJoint => (t.stage2_epochs, t.stage2_lr),
            _ => (t.stage1_epochs, t.stage1_lr),
        };
        p.epochs = epochs;
        p.optim.lr = lr;
        p.optim.weight_decay = t.weight_decay;
        p.alpha = t.alpha;
        p.grad_accum = t.grad_accum;
        p.max_steps = t.max_steps;
        p.use_imaginer = t.use_imaginer;
        p
    }

    pub fn http_config(&self) -> HttpClientConfig {
        let l = &self.llm;
        HttpClientConfig {
            base_url: l.base_url.clone(),
            model: l.model.clone(),
            timeout_secs: l.timeout_secs,
            max_retries: l.max_retries,
            backoff_ms: l.backoff_ms,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.hypotheses.k, 3);
        assert_eq!(c.training.alpha, 5.0);
        assert_eq!(c.hypotheses.negatives, 100);
        assert_eq!(c.contrast.epochs, 10);
        assert_eq!(c.training.stage1_epochs, 2);
        assert_eq!(c.training.stage2_epochs, 1);
        assert_eq!(c.contrast.tau, 0.07);
        c.validate().unwrap();
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_field_rejected() {
        let err = RunConfig::parse("[training]\nalhpa = 2.0\n").unwrap_err();
        assert!(err.contains("alhpa"), "{err}");
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::parse("seed = 4\n[hypotheses]\nk = 5\n").unwrap();
        c.apply(&Overrides {
            k: Some(2),
            alpha: Some(1.5),
            ..Overrides::default()
        });
        assert_eq!((c.seed, c.hypotheses.k, c.training.alpha), (4, 2, 1.5));
    }

    #[test]
    fn roundtrip_through_toml() {
        let mut c = RunConfig::default();
        c.paths.fixture = Some("fx.json".into());
        c.reasoner.placeholder_len = Some(3);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_alpha_rejected() {
        let mut c = RunConfig::default();
        c.training.alpha = 0.0;
        assert!(matches!(c.validate(), Err(IoError::Config(_))));
    }
}
