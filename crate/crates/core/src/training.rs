//! Two-stage training: independent Stage I runs for the reasoner, the
//! imaginer adapters (with the bridge) and the contrastive selector, then
//! joint end-to-end optimisation of `CE + α · Diffusion`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Graph, Var};
use crate::contrast::{train_contrast, ContrastConfig, ContrastTraining};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::hypothesis::HypothesisSet;
use crate::imaginer::{
    diffusion_loss, frame_relevance_weights, hybrid_condition, is_adapter_param, ConditionEmbedder, Imaginer,
    ImaginerConfig, LatentMapper,
};
use crate::nn::{Activation, Mlp2};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamGrads, ParamStore};
use crate::reasoner::{
    assemble_input, ce_loss, reason, target_tokens, AssembleOptions, AssembledInput, DecodeMode, ReasonerBackbone,
    ReasonerConfig, ReasonerOutput, TrainableSubset,
};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::text::TextFeaturizer;
use crate::tokenizer::Tokenizer;

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const BRIDGE_PREFIX: &str = "bridge";

/// `(S, d_model) -> (S, d_cond)` two-layer MLP with SiLU.
#[derive(Debug, Clone)]
pub struct BridgeLayer {
    pub mlp: Mlp2,
}

impl BridgeLayer {
    pub fn new(store: &mut ParamStore, d_model: usize, hidden: usize, d_cond: usize, rng: &mut Rng64) -> Self {
        Self {
            mlp: Mlp2::new(store, BRIDGE_PREFIX, d_model, hidden, d_cond, Activation::Silu, rng),
        }
    }

    pub fn forward(&self, cx: &Ctx, c_t: Var) -> Var {
        self.mlp.forward(cx, c_t)
    }
}

/// `ce + α · diff`.
pub fn joint_loss(g: &Graph, ce: Var, diff: Var, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::precondition("alpha must be > 0"));
    }
    Ok(g.add(ce, g.scale(diff, alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    IReasoner,
    IImaginer,
    IContrast,
    IIJoint,
}

/// Test hooks on the Stage II objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossHooks {
    /// Drop the CE term, leaving `α · diff`.
    pub zero_ce: bool,
    /// Cut the diffusion term from the tape.
    pub detach_diffusion: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub alpha: f64,
    pub optim: AdamWConfig,
    pub seed: u64,
    /// Examples per optimiser step.
    pub grad_accum: usize,
    /// Epoch callback cadence (0 disables).
    pub checkpoint_every: usize,
    pub max_steps: Option<usize>,
    pub use_imaginer: bool,
    pub reasoner_subset: TrainableSubset,
    pub hooks: LossHooks,
}

impl TrainPlan {
    pub fn new(stage: Stage, seed: u64) -> Self {
        let (epochs, lr) = match stage {
            Stage::IReasoner | Stage::IImaginer => (2, 1e-4),
            Stage::IContrast => (10, 1e-4),
            Stage::IIJoint => (1, 1e-5),
        };
        Self {
            stage,
            epochs,
            alpha: DEFAULT_ALPHA,
            optim: AdamWConfig {
                lr,
                ..AdamWConfig::default()
            },
            seed,
            grad_accum: 1,
            checkpoint_every: 1,
            max_steps: None,
            use_imaginer: true,
            reasoner_subset: TrainableSubset::All,
            hooks: LossHooks::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.grad_accum == 0 {
            return Err(Error::validation("grad_accum must be >= 1"));
        }
        if self.stage == Stage::IIJoint && !(self.alpha > 0.0) {
            return Err(Error::validation("alpha must be > 0 for joint training"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub tokens: Vec<u32>,
    pub text: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub reasoner: ReasonerConfig,
    pub imaginer: ImaginerConfig,
    pub bridge_hidden: usize,
    pub seed: u64,
}

/// Reasoner, bridge and imaginer sharing one parameter store under the
/// `reasoner.`, `bridge.` and `imaginer.` prefixes.
#[derive(Debug, Clone)]
pub struct AbductiveModel {
    pub store: ParamStore,
    pub reasoner: ReasonerBackbone,
    pub bridge: BridgeLayer,
    pub imaginer: Imaginer,
    pub tokenizer: Tokenizer,
    pub cfg: ModelConfig,
}

impl AbductiveModel {
    pub fn new(cfg: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        if cfg.reasoner.vocab_size != tokenizer.vocab_size() {
            return Err(Error::validation(format!(
                "reasoner vocab {} != tokenizer vocab {}",
                cfg.reasoner.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut store = ParamStore::new();
        let reasoner = ReasonerBackbone::new(&mut store, cfg.reasoner, &mut Rng64::stream(cfg.seed, 0xA1));
        let bridge = BridgeLayer::new(
            &mut store,
            cfg.reasoner.d_model,
            cfg.bridge_hidden,
            cfg.imaginer.unet.d_text,
            &mut Rng64::stream(cfg.seed, 0xA2),
        );
        let imaginer = Imaginer::new(&mut store, cfg.imaginer, &mut Rng64::stream(cfg.seed, 0xA3))?;
        Ok(Self {
            store,
            reasoner,
            bridge,
            imaginer,
            tokenizer,
            cfg,
        })
    }

    /// Greedy explanation for an assembled input.
    pub fn explain(&self, input: &AssembledInput) -> Result<String> {
        Ok(self.predict(input)?.text)
    }

    /// Greedy decoding with the generated token ids.
    pub fn predict(&self, input: &AssembledInput) -> Result<Prediction> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let out = reason(
            &cx,
            &self.reasoner,
            &self.tokenizer,
            input,
            DecodeMode::Greedy {
                max_len: self.cfg.reasoner.max_target_tokens,
            },
        )?;
        Ok(Prediction {
            tokens: out.tokens,
            text: out.text,
            truncated: out.truncated,
        })
    }

    /// Sets trainability for a stage. Frozen U-Net weights stay frozen in
    /// every stage.
    pub fn configure_trainable(&mut self, plan: &TrainPlan) {
        let subset = plan.reasoner_subset.clone();
        let stage = plan.stage;
        let imag = plan.use_imaginer;
        self.store.set_trainable_where(|name| {
            let adapter_or_bridge = name.starts_with(BRIDGE_PREFIX) || (name.starts_with(crate::imaginer::PREFIX) && is_adapter_param(name));
            match stage {
                Stage::IReasoner => subset.selects(name),
                Stage::IImaginer => adapter_or_bridge,
                Stage::IIJoint => subset.selects(name) || (imag && adapter_or_bridge),
                Stage::IContrast => false,
            }
        });
    }
}

/// One supervised sequence: reasoner input, target ids, the hybrid visual
/// condition and the target latent video of the masked event.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub sample_id: String,
    pub input: AssembledInput,
    pub target: Vec<u32>,
    pub c_v: Tensor,
    pub latents: Tensor,
}

/// Shared resources for turning samples into [`TrainingExample`]s.
pub struct ExampleBuilder<'a> {
    pub tokenizer: &'a Tokenizer,
    pub featurizer: &'a dyn TextFeaturizer,
    pub embedder: &'a ConditionEmbedder,
    pub mapper: &'a LatentMapper,
    pub assemble: AssembleOptions,
    pub m_local: usize,
    pub latent_frames: usize,
}

impl ExampleBuilder<'_> {
    pub fn build(&self, sample: &Sample, captions: &[String], topk: &HypothesisSet) -> Result<TrainingExample> {
        let explanation = sample
            .explanation
            .as_deref()
            .ok_or_else(|| Error::precondition(format!("{}: no explanation", sample.sample_id)))?;
        let input = assemble_input(sample, captions, topk, self.tokenizer, &self.assemble)?;
        let mut rows = Vec::new();
        for ev in sample.observed() {
            let f = ev
                .frame_features
                .as_ref()
                .ok_or_else(|| Error::precondition(format!("{}: event {} lacks features", sample.sample_id, ev.event_id)))?;
            rows.push(f.clone());
        }
        let frames = self.embedder.embed_frames(&Tensor::cat_rows(&rows)?)?;
        let c_h = self.embedder.embed_text(&self.featurizer.featurize(explanation))?;
        let gamma = frame_relevance_weights(&frames, &c_h)?;
        let hybrid = hybrid_condition(&frames, &gamma, self.m_local.min(frames.dim(0)))?;
        Ok(TrainingExample {
            sample_id: sample.sample_id.clone(),
            input,
            target: target_tokens(self.tokenizer, explanation),
            c_v: hybrid.c_v(),
            latents: self.mapper.event_latents(sample.masked_event(), self.latent_frames)?,
        })
    }
}

/// Loss nodes of one example on graph `cx.g`.
#[derive(Debug, Clone, Copy)]
pub struct ExampleLosses {
    pub ce: Option<Var>,
    pub diff: Option<Var>,
    pub total: Var,
}

/// Builds the stage objective for one example.
pub fn example_losses(
    cx: &Ctx,
    model: &AbductiveModel,
    ex: &TrainingExample,
    plan: &TrainPlan,
    noise_rng: &mut Rng64,
) -> Result<ExampleLosses> {
    let g = cx.g;
    let out: ReasonerOutput = reason(
        cx,
        &model.reasoner,
        &model.tokenizer,
        &ex.input,
        DecodeMode::TeacherForced { target: &ex.target },
    )?;
    let want_ce = matches!(plan.stage, Stage::IReasoner | Stage::IIJoint);
    let want_diff = match plan.stage {
        Stage::IImaginer => true,
        Stage::IIJoint => plan.use_imaginer,
        _ => false,
    };
    let targets = &ex.target[..out.tokens.len()];
    let ce = if want_ce { Some(ce_loss(g, out.logits, targets)?) } else { None };
    let diff = if want_diff {
        let cond = model.bridge.forward(cx, out.c_t);
        let d = diffusion_loss(
            cx,
            &model.imaginer,
            &model.imaginer.schedule,
            model.imaginer.cfg.diffusion.gamma_snr,
            &ex.latents,
            cond,
            g.constant(ex.c_v.clone()),
            noise_rng,
        )?;
        Some(d.loss)
    } else {
        None
    };
    let total = match (ce, diff) {
        (Some(c), Some(d)) => {
            let d = if plan.hooks.detach_diffusion { g.detach(d) } else { d };
            if plan.hooks.zero_ce {
                g.scale(d, plan.alpha)
            } else {
                joint_loss(g, c, d, plan.alpha)?
            }
        }
        (Some(c), None) => c,
        (None, Some(d)) => d,
        (None, None) => return Err(Error::precondition("stage has no objective")),
    };
    Ok(ExampleLosses { ce, diff, total })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: Option<f64>,
    pub diff: Option<f64>,
    pub joint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub records: Vec<StepRecord>,
    pub epochs_completed: usize,
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch { epoch: usize, model: &'a AbductiveModel },
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn train_loop(
    model: &mut AbductiveModel,
    plan: &TrainPlan,
    examples: &[TrainingExample],
    mut on_event: impl FnMut(TrainEvent),
) -> Result<StageReport> {
    plan.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    model.configure_trainable(plan);
    let mut opt = AdamW::new(plan.optim);
    let mut shuffle_rng = Rng64::stream(plan.seed, 0x5F);
    let mut noise_rng = Rng64::stream(plan.seed, 0x70);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut records = Vec::new();
    let mut step = 0;
    let mut epochs_completed = 0;
    'outer: for epoch in 0..plan.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(plan.grad_accum) {
            if plan.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let mut grads = ParamGrads::new();
            let (mut ces, mut diffs, mut joint) = (Vec::new(), Vec::new(), 0.0);
            for &i in chunk {
                let g = Graph::new();
                let cx = Ctx::new(&g, &model.store);
                let l = example_losses(&cx, model, &examples[i], plan, &mut noise_rng)?;
                ces.push(l.ce.map(|v| g.item(v)));
                diffs.push(l.diff.map(|v| g.item(v)));
                joint += g.item(l.total);
                grads.accumulate(&g.backward(l.total).param_grads());
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(&mut model.store, &grads);
            let rec = StepRecord {
                step,
                epoch,
                ce: mean_opt(&ces),
                diff: mean_opt(&diffs),
                joint: joint / chunk.len() as f64,
            };
            on_event(TrainEvent::Step(&rec));
            records.push(rec);
            step += 1;
        }
        epochs_completed = epoch + 1;
        if plan.checkpoint_every > 0 && epochs_completed % plan.checkpoint_every == 0 {
            on_event(TrainEvent::Epoch { epoch, model });
        }
    }
    Ok(StageReport {
        stage: plan.stage,
        records,
        epochs_completed,
    })
}

pub enum Stage1Input<'a> {
    Pipeline {
        model: &'a mut AbductiveModel,
        examples: &'a [TrainingExample],
    },
    Contrast {
        samples: &'a [Sample],
        negatives: &'a BTreeMap<String, HypothesisSet>,
        featurizer: &'a dyn TextFeaturizer,
        cfg: ContrastConfig,
    },
}

pub enum Stage1Output {
    Pipeline(StageReport),
    Contrast(ContrastTraining),
}

pub fn run_stage1(plan: &TrainPlan, input: Stage1Input) -> Result<Stage1Output> {
    run_stage1_with(plan, input, |_| {})
}

pub fn run_stage1_with(plan: &TrainPlan, input: Stage1Input, on_event: impl FnMut(TrainEvent)) -> Result<Stage1Output> {
    match (plan.stage, input) {
        (Stage::IContrast, Stage1Input::Contrast { samples, negatives, featurizer, cfg }) => {
            Ok(Stage1Output::Contrast(train_contrast(samples, negatives, featurizer, &cfg)?))
        }
        (Stage::IReasoner | Stage::IImaginer, Stage1Input::Pipeline { model, examples }) => {
            Ok(Stage1Output::Pipeline(train_loop(model, plan, examples, on_event)?))
        }
        (stage, _) => Err(Error::precondition(format!("stage {stage:?} does not match the Stage I input"))),
    }
}

/// Parameter snapshots produced by Stage I.
#[derive(Debug, Clone, Default)]
pub struct Stage1Checkpoints {
    pub reasoner: Option<ParamStore>,
    pub imaginer: Option<ParamStore>,
}

pub fn run_stage2(
    plan: &TrainPlan,
    model: &mut AbductiveModel,
    examples: &[TrainingExample],
    checkpoints: &Stage1Checkpoints,
) -> Result<StageReport> {
    run_stage2_with(plan, model, examples, checkpoints, |_| {})
}

pub fn run_stage2_with(
    plan: &TrainPlan,
    model: &mut AbductiveModel,
    examples: &[TrainingExample],
    checkpoints: &Stage1Checkpoints,
    on_event: impl FnMut(TrainEvent),
) -> Result<StageReport> {
    if plan.stage != Stage::IIJoint {
        return Err(Error::precondition("run_stage2 needs a II_joint plan"));
    }
    let reasoner = checkpoints
        .reasoner
        .as_ref()
        .ok_or_else(|| Error::precondition("missing Stage I reasoner checkpoint"))?;
    model.store.load_prefix_from(reasoner, crate::reasoner::PREFIX)?;
    if plan.use_imaginer {
        let imaginer = checkpoints
            .imaginer
            .as_ref()
            .ok_or_else(|| Error::precondition("missing Stage I imaginer checkpoint"))?;
        model.store.load_prefix_from(imaginer, crate::imaginer::PREFIX)?;
        model.store.load_prefix_from(imaginer, BRIDGE_PREFIX)?;
    }
    train_loop(model, plan, examples, on_event)
}

#[cfg(test)]
mod tests;
