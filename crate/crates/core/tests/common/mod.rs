#![allow(dead_code)]

use abductive_core::data::{Sample, Split};
use abductive_core::hypothesis::HypothesisSet;
use abductive_core::imaginer::{ConditionEmbedder, DiffusionConfig, ImaginerConfig, LatentMapper, UNetConfig};
use abductive_core::reasoner::{AssembleOptions, ReasonerConfig, DEFAULT_QUERY, REASONER_TEMPLATE};
use abductive_core::synthetic::{generate_split, observed_captions, WorldConfig};
use abductive_core::text::HashingFeaturizer;
use abductive_core::tokenizer::Tokenizer;
use abductive_core::training::{AbductiveModel, ExampleBuilder, ModelConfig, TrainingExample};

pub const FEATURE_DIM: usize = 8;

pub fn small_imaginer() -> ImaginerConfig {
    ImaginerConfig {
        unet: UNetConfig {
            latent_channels: 2,
            base_channels: 8,
            latent_hw: 4,
            d_text: 6,
            d_visual: 5,
            groups: 2,
            time_dim: 8,
            reduction: 4,
        },
        diffusion: DiffusionConfig {
            timesteps: 50,
            beta_start: 1e-3,
            beta_end: 0.05,
            gamma_snr: 5.0,
            latent_frames: 2,
        },
        m_local: 2,
    }
}

/// At least `n` synthetic training samples, truncated to exactly `n`.
pub fn samples(n: usize, seed: u64) -> (Vec<Sample>, HashingFeaturizer) {
    let feat = HashingFeaturizer::new(FEATURE_DIM, seed);
    let world = WorldConfig {
        frame_hw: 8,
        ..WorldConfig::default()
    };
    let mut s = generate_split(&world, &feat, Split::Train, n.div_ceil(3), seed).unwrap().samples;
    assert!(s.len() >= n);
    s.truncate(n);
    (s, feat)
}

pub fn model_for(samples: &[Sample], seed: u64) -> AbductiveModel {
    let mut texts = vec![REASONER_TEMPLATE.to_string(), DEFAULT_QUERY.to_string()];
    for s in samples {
        texts.extend(s.events.iter().filter_map(|e| e.caption.clone()));
    }
    let tok = Tokenizer::train(texts.iter().map(String::as_str), 300);
    let mut r = ReasonerConfig::new(tok.vocab_size(), Some(FEATURE_DIM));
    r.d_model = 16;
    r.heads = 2;
    r.enc_layers = 1;
    r.dec_layers = 1;
    let cfg = ModelConfig {
        reasoner: r,
        imaginer: small_imaginer(),
        bridge_hidden: 8,
        seed,
    };
    AbductiveModel::new(cfg, tok).unwrap()
}

pub fn examples(model: &AbductiveModel, samples: &[Sample], feat: &HashingFeaturizer) -> Vec<TrainingExample> {
    let u = model.cfg.imaginer.unet;
    let embedder = ConditionEmbedder::new(FEATURE_DIM, FEATURE_DIM, u.d_visual, 3);
    let mapper = LatentMapper::new(u.latent_hw, u.latent_channels, 3);
    let b = ExampleBuilder {
        tokenizer: &model.tokenizer,
        featurizer: feat,
        embedder: &embedder,
        mapper: &mapper,
        assemble: AssembleOptions::default(),
        m_local: model.cfg.imaginer.m_local,
        latent_frames: model.cfg.imaginer.diffusion.latent_frames,
    };
    samples
        .iter()
        .map(|s| b.build(s, &observed_captions(s), &HypothesisSet::new(s.sample_id.clone())).unwrap())
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
