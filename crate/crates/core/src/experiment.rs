//! Scaled-down ablation on the synthetic world: the full pipeline against
//! runs without hypotheses and without the imaginer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::contrast::{select_topk, train_contrast, ContrastConfig};
use crate::data::{partition_segments, Sample, Split};
use crate::error::{Error, Result};
use crate::hypothesis::{generate_candidates, generate_negatives, GenerationConfig, HypothesisSet};
use crate::imaginer::{ConditionEmbedder, DiffusionConfig, ImaginerConfig, LatentMapper, UNetConfig};
use crate::metrics::{evaluate, EvalPair, EvalReport};
use crate::reasoner::{assemble_input, AssembleOptions, ReasonerConfig, REASONER_TEMPLATE};
use crate::synthetic::{generate_split, observed_captions, ScriptedLlm, WorldConfig};
use crate::text::HashingFeaturizer;
use crate::tokenizer::Tokenizer;
use crate::training::{
    run_stage1, run_stage2, AbductiveModel, ExampleBuilder, ModelConfig, Stage, Stage1Checkpoints, Stage1Input,
    TrainPlan, TrainingExample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    HypothesesOnly,
    ImaginerOnly,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::HypothesesOnly, Arm::ImaginerOnly, Arm::Full];

    pub fn uses_hypotheses(self) -> bool {
        matches!(self, Arm::HypothesesOnly | Arm::Full)
    }

    pub fn uses_imaginer(self) -> bool {
        matches!(self, Arm::ImaginerOnly | Arm::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::HypothesesOnly => "hypotheses_only",
            Arm::ImaginerOnly => "imaginer_only",
            Arm::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub train_videos: usize,
    pub test_videos: usize,
    pub feature_dim: usize,
    pub candidates: usize,
    pub temperature: f64,
    pub k: usize,
    pub contrast: ContrastConfig,
    pub reasoner_d_model: usize,
    pub reasoner_heads: usize,
    pub reasoner_layers: usize,
    pub imaginer: ImaginerConfig,
    pub bridge_hidden: usize,
    pub tokenizer_vocab: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub alpha: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train_videos: 40,
            test_videos: 15,
            feature_dim: 32,
            candidates: 10,
            temperature: 1.4,
            k: 3,
            contrast: ContrastConfig {
                negatives_per_positive: 20,
                // The selector is the lever for the hypothesis arms and is
                // still improving after 10 epochs at this corpus size.
                epochs: 30,
                lr: 1e-3,
                d_joint: 64,
                d_model: 32,
                heads: 4,
                text_hidden: 64,
                ..ContrastConfig::default()
            },
            reasoner_d_model: 32,
            reasoner_heads: 4,
            reasoner_layers: 1,
            imaginer: ImaginerConfig {
                unet: UNetConfig {
                    latent_channels: 4,
                    base_channels: 8,
                    latent_hw: 8,
                    d_text: 16,
                    d_visual: 16,
                    groups: 4,
                    time_dim: 16,
                    reduction: 4,
                },
                diffusion: DiffusionConfig {
                    timesteps: 100,
                    beta_start: 1e-3,
                    beta_end: 0.05,
                    latent_frames: 2,
                    ..DiffusionConfig::default()
                },
                m_local: 4,
            },
            bridge_hidden: 32,
            tokenizer_vocab: 400,
            stage1_epochs: 20,
            stage2_epochs: 4,
            stage1_lr: 2e-3,
            stage2_lr: 2e-4,
            alpha: 5.0,
        }
    }
}

/// Everything an arm needs that does not depend on the arm.
#[derive(Debug, Clone)]
pub struct PreparedWorld {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub featurizer: HashingFeaturizer,
    pub tokenizer: Tokenizer,
    /// Top-k selected hypotheses per sample id.
    pub topk: BTreeMap<String, HypothesisSet>,
    pub selector_accuracy: f64,
    /// Fraction of test samples whose top-1 hypothesis is the ground truth.
    pub selector_test_hit: f64,
}

fn world_tokenizer(train: &[Sample], vocab: usize) -> Tokenizer {
    let mut texts: Vec<String> = Vec::new();
    texts.push(String::from(REASONER_TEMPLATE));
    texts.push(String::from(crate::reasoner::DEFAULT_QUERY));
    for s in train {
        texts.extend(s.events.iter().filter_map(|e| e.caption.clone()));
    }
    Tokenizer::train(texts.iter().map(String::as_str), vocab)
}

/// Generates the corpus, trains the selector on scripted negatives and picks
/// the top-k hypotheses for every sample.
pub fn prepare_world(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedWorld> {
    let featurizer = HashingFeaturizer::new(cfg.feature_dim, seed ^ 0xFEA7);
    let train = generate_split(&cfg.world, &featurizer, Split::Train, cfg.train_videos, seed)?.samples;
    let test = generate_split(&cfg.world, &featurizer, Split::Test, cfg.test_videos, seed)?.samples;
    let llm = ScriptedLlm::new(seed);
    let neg_cfg = GenerationConfig::new(cfg.contrast.negatives_per_positive, 1.0);
    let mut negatives = BTreeMap::new();
    for s in &train {
        let pos = s.explanation.as_deref().unwrap_or_default();
        let g = generate_negatives(&s.sample_id, pos, &observed_captions(s), &llm, &neg_cfg)?;
        negatives.insert(s.sample_id.clone(), g.set);
    }
    let contrast_cfg = ContrastConfig { seed, ..cfg.contrast };
    let trained = train_contrast(&train, &negatives, &featurizer, &contrast_cfg)?;
    let selector_accuracy = trained.history[trained.best_epoch].accuracy;
    let cand_cfg = GenerationConfig::new(cfg.candidates, cfg.temperature);
    let mut topk = BTreeMap::new();
    let mut hits = 0;
    for s in train.iter().chain(&test) {
        let caps = observed_captions(s);
        let g = generate_candidates(&s.sample_id, &caps, s.mask_index, &llm, &cand_cfg)?;
        let sel = select_topk(&g.set, &partition_segments(s), &trained.model, &featurizer, cfg.k)?;
        if s.split == Some(Split::Test) && sel.set.texts().first().copied() == s.explanation.as_deref() {
            hits += 1;
        }
        topk.insert(s.sample_id.clone(), sel.set);
    }
    log::info!("seed {seed}: selector train accuracy {selector_accuracy:.3}");
    Ok(PreparedWorld {
        seed,
        tokenizer: world_tokenizer(&train, cfg.tokenizer_vocab),
        selector_test_hit: hits as f64 / test.len().max(1) as f64,
        train,
        test,
        featurizer,
        topk,
        selector_accuracy,
    })
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub report: EvalReport,
    pub predictions: Vec<(String, String)>,
}

impl ArmResult {
    pub fn cider(&self) -> f64 {
        self.report.score("cider").unwrap_or(0.0)
    }
}

/// Trains and evaluates one arm on a prepared world.
pub fn run_arm(world: &PreparedWorld, cfg: &ExperimentConfig, arm: Arm) -> Result<ArmResult> {
    let seed = world.seed;
    let mut rc = ReasonerConfig::new(world.tokenizer.vocab_size(), Some(cfg.feature_dim));
    rc.d_model = cfg.reasoner_d_model;
    rc.heads = cfg.reasoner_heads;
    rc.enc_layers = cfg.reasoner_layers;
    rc.dec_layers = cfg.reasoner_layers;
    let model_cfg = ModelConfig {
        reasoner: rc,
        imaginer: cfg.imaginer,
        bridge_hidden: cfg.bridge_hidden,
        seed,
    };
    let mut model = AbductiveModel::new(model_cfg, world.tokenizer.clone())?;
    let empty = |id: &str| HypothesisSet::new(id);
    let hyps = |s: &Sample| -> HypothesisSet {
        if arm.uses_hypotheses() {
            world.topk.get(&s.sample_id).cloned().unwrap_or_else(|| empty(&s.sample_id))
        } else {
            empty(&s.sample_id)
        }
    };
    let embedder = ConditionEmbedder::new(cfg.feature_dim, cfg.feature_dim, cfg.imaginer.unet.d_visual, seed ^ 0xE3B);
    let mapper = LatentMapper::new(cfg.imaginer.unet.latent_hw, cfg.imaginer.unet.latent_channels, seed ^ 0x1A7);
    let assemble = AssembleOptions {
        seed,
        ..AssembleOptions::default()
    };
    let builder = ExampleBuilder {
        tokenizer: &world.tokenizer,
        featurizer: &world.featurizer,
        embedder: &embedder,
        mapper: &mapper,
        assemble: assemble.clone(),
        m_local: cfg.imaginer.m_local,
        latent_frames: cfg.imaginer.diffusion.latent_frames,
    };
    let examples: Vec<TrainingExample> = world
        .train
        .iter()
        .map(|s| builder.build(s, &observed_captions(s), &hyps(s)))
        .collect::<Result<_>>()?;

    let plan = |stage: Stage, epochs: usize, lr: f64, tag: u64| {
        let mut p = TrainPlan::new(stage, seed ^ tag);
        p.epochs = epochs;
        p.optim.lr = lr;
        p.alpha = cfg.alpha;
        p.use_imaginer = arm.uses_imaginer();
        p.checkpoint_every = 0;
        p
    };
    let p1 = plan(Stage::IReasoner, cfg.stage1_epochs, cfg.stage1_lr, 0x51);
    run_stage1(&p1, Stage1Input::Pipeline { model: &mut model, examples: &examples })?;
    let mut checkpoints = Stage1Checkpoints {
        reasoner: Some(model.store.clone()),
        imaginer: None,
    };
    if arm.uses_imaginer() {
        let p1i = plan(Stage::IImaginer, cfg.stage1_epochs, cfg.stage1_lr, 0x52);
        run_stage1(&p1i, Stage1Input::Pipeline { model: &mut model, examples: &examples })?;
        checkpoints.imaginer = Some(model.store.clone());
    }
    let p2 = plan(Stage::IIJoint, cfg.stage2_epochs, cfg.stage2_lr, 0x53);
    run_stage2(&p2, &mut model, &examples, &checkpoints)?;

    let mut pairs = Vec::with_capacity(world.test.len());
    let mut predictions = Vec::with_capacity(world.test.len());
    for s in &world.test {
        let input = assemble_input(s, &observed_captions(s), &hyps(s), &world.tokenizer, &assemble)?;
        let text = model.explain(&input)?;
        let reference = s
            .explanation
            .clone()
            .ok_or_else(|| Error::precondition(format!("{}: test sample without reference", s.sample_id)))?;
        pairs.push(EvalPair::new(s.sample_id.clone(), text.clone(), alloc::vec![reference])?);
        predictions.push((s.sample_id.clone(), text));
    }
    let report = evaluate(&pairs, &[])?;
    log::info!("seed {seed} arm {}: CIDEr {:.3}", arm.name(), report.score("cider").unwrap_or(0.0));
    Ok(ArmResult {
        arm,
        seed,
        report,
        predictions,
    })
}

/// Every arm on every seed.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64], arms: &[Arm]) -> Result<Vec<ArmResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let world = prepare_world(cfg, seed)?;
        for &arm in arms {
            out.push(run_arm(&world, cfg, arm)?);
        }
    }
    Ok(out)
}
