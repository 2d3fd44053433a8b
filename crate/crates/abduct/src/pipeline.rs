//! The pipeline stages behind each subcommand. Every stage reads its inputs
//! from the dataset root and the run directory and writes its artifacts
//! back to the run directory:
//!
//! ```text
//! run_dir/
//!   config.toml                 snapshot of the effective configuration
//!   captions.jsonl              observed-event captions per sample
//!   negatives.jsonl             hard negatives per training sample
//!   candidates.jsonl            generated candidates per sample
//!   contrast/epoch-NNN, best    selector checkpoints
//!   contrast.log.tsv            epoch, mean loss, training accuracy
//!   topk.jsonl                  selected hypotheses
//!   tokenizer.txt
//!   stage1/{reasoner,imaginer}/epoch-NNN, final
//!   stage2/epoch-NNN
//!   model/                      final joint model
//!   scalars.<stage>.tsv         step, epoch, ce, diff, joint
//!   outputs/<sample_id>.json    reasoner outputs from `infer`
//!   predictions.tsv, report.txt, report.json
//! ```
//!
//! With `dry_run` set, stages validate their inputs and stop before
//! writing anything.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use abductive_core::contrast::{select_topk, train_contrast_with, ContrastModel};
use abductive_core::data::{build_var_split, partition_segments, Sample, Split};
use abductive_core::hypothesis::{caption_events, generate_candidates, generate_negatives, ChatClient, ChatRequest, ClientError, GenerationConfig, HypothesisSet};
use abductive_core::imaginer::{ConditionEmbedder, LatentMapper};
use abductive_core::metrics::{evaluate, EvalPair, EvalReport};
use abductive_core::reasoner::{assemble_input, AssembleOptions, DEFAULT_QUERY, REASONER_TEMPLATE};
use abductive_core::synthetic::{generate_split, ScriptedLlm, WorldConfig};
use abductive_core::text::HashingFeaturizer;
use abductive_core::tokenizer::Tokenizer;
use abductive_core::training::{
    run_stage1_with, run_stage2_with, AbductiveModel, ExampleBuilder, ModelConfig, Prediction, Stage, Stage1Checkpoints,
    Stage1Input, StepRecord, TrainEvent, TrainingExample,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Meta};
use crate::config::{Provider, RunConfig};
use crate::dataset::{load_split, manifest_path, read_hypotheses, sample_path, write_hypotheses, write_split};
use crate::error::{IoError, Result};
use crate::llm::{read_fixture, HttpChatClient, MockChatClient, RecordingClient};
use crate::sample_io::{load_sample, load_video};

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Per-sample captions of the observed events, in event order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaptionLine {
    sample_id: String,
    captions: Vec<String>,
}

/// What `infer` writes per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub sample_id: String,
    #[serde(flatten)]
    pub prediction: Prediction,
    pub hypotheses: Vec<String>,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| IoError::at(p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        mkdir(d)?;
    }
    fs::write(path, text).map_err(|e| IoError::at(path, e))
}

fn missing(path: &Path, hint: &str) -> IoError {
    IoError::Config(format!("{} not found; {hint}", path.display()))
}

/// Step records as tab-separated text; absent terms are written as `-`.
#[derive(Debug, Default)]
struct ScalarLog(String);

impl ScalarLog {
    fn new() -> Self {
        Self(String::from("step\tepoch\tce\tdiff\tjoint\n"))
    }

    fn push(&mut self, r: &StepRecord) {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        self.0
            .push_str(&format!("{}\t{}\t{}\t{}\t{:.6}\n", r.step, r.epoch, opt(r.ce), opt(r.diff), r.joint));
    }
}

/// Keeps the first error raised inside a training callback.
fn keep_first(slot: &mut Option<IoError>, r: Result<()>) {
    if let (None, Err(e)) = (&slot, r) {
        *slot = Some(e);
    }
}

fn meta_int(meta: &Meta, key: &str) -> Option<usize> {
    meta.get(key).and_then(toml::Value::as_integer).map(|v| v as usize)
}

/// Reports the configured model name, so requests recorded through it
/// replay against the fixture client.
struct Named<C> {
    inner: C,
    model: String,
}

impl<C: ChatClient> ChatClient for Named<C> {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<String, ClientError> {
        self.inner.complete(req)
    }
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub dry_run: bool,
    /// Record every language-model exchange to this fixture.
    pub record: Option<PathBuf>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, dry_run: bool) -> Self {
        Self {
            cfg,
            dry_run,
            record: None,
        }
    }

    fn run(&self, rel: &str) -> PathBuf {
        self.cfg.paths.run_dir.join(rel)
    }

    fn root(&self) -> &Path {
        &self.cfg.paths.dataset_root
    }

    pub fn featurizer(&self) -> HashingFeaturizer {
        HashingFeaturizer::new(self.cfg.text_dim, self.cfg.text_seed)
    }

    /// Creates the run directory and writes the config snapshot.
    fn begin(&self) -> Result<()> {
        mkdir(&self.cfg.paths.run_dir)?;
        write_text(&self.run("config.toml"), &self.cfg.to_toml())
    }

    /// The fixture replayer when a fixture is configured, otherwise the
    /// configured provider.
    pub fn client(&self) -> Result<Box<dyn ChatClient>> {
        let model = self.cfg.llm.model.clone();
        let inner: Box<dyn ChatClient> = match (&self.cfg.paths.fixture, &self.cfg.llm.provider) {
            (Some(f), _) => {
                let entries = read_fixture(f)?;
                if entries.is_empty() {
                    return Err(IoError::doc(f, "fixture has no entries"));
                }
                Box::new(MockChatClient::new(model, entries))
            }
            (None, Provider::Scripted) => Box::new(Named {
                inner: ScriptedLlm::new(self.cfg.seed),
                model,
            }),
            (None, Provider::Http) => Box::new(HttpChatClient::from_env(self.cfg.http_config())?),
        };
        Ok(inner)
    }

    fn splits_present(&self) -> Vec<Split> {
        SPLITS.into_iter().filter(|s| manifest_path(self.root(), *s).is_file()).collect()
    }

    fn load(&self, split: Split) -> Result<Vec<Sample>> {
        let m = manifest_path(self.root(), split);
        if !m.is_file() {
            return Err(missing(&m, "run `ingest` or `synth` first"));
        }
        load_split(self.root(), split)
    }

    fn read_sets(&self, rel: &str, hint: &str) -> Result<BTreeMap<String, HypothesisSet>> {
        let p = self.run(rel);
        if !p.is_file() {
            return Err(missing(&p, hint));
        }
        read_hypotheses(&p)
    }

    fn read_captions(&self) -> Result<BTreeMap<String, Vec<String>>> {
        let p = self.run("captions.jsonl");
        if !p.is_file() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&p).map_err(|e| IoError::at(&p, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let c: CaptionLine = serde_json::from_str(l).map_err(|e| IoError::doc(&p, e.to_string()))?;
                Ok((c.sample_id, c.captions))
            })
            .collect()
    }

    fn write_captions(&self, caps: &BTreeMap<String, Vec<String>>) -> Result<()> {
        let mut out = String::new();
        for (id, c) in caps {
            let line = CaptionLine {
                sample_id: id.clone(),
                captions: c.clone(),
            };
            out.push_str(&serde_json::to_string(&line).map_err(|e| IoError::Format(e.to_string()))?);
            out.push('\n');
        }
        write_text(&self.run("captions.jsonl"), &out)
    }

    /// Cached captions, else the events' own, else the captioner.
    fn captions(
        &self,
        s: &Sample,
        cache: &mut BTreeMap<String, Vec<String>>,
        captioner: Option<&dyn ChatClient>,
    ) -> Result<Vec<String>> {
        if let Some(c) = cache.get(&s.sample_id) {
            return Ok(c.clone());
        }
        let observed: Vec<_> = s.observed().collect();
        let caps = caption_events(&observed, captioner).map_err(|e| IoError::Config(format!("{}: {e}", s.sample_id)))?;
        cache.insert(s.sample_id.clone(), caps.clone());
        Ok(caps)
    }

    fn with_client<T>(&self, f: impl FnOnce(&dyn ChatClient) -> Result<T>) -> Result<T> {
        let client = self.client()?;
        match &self.record {
            Some(path) if !self.dry_run => {
                let rec = RecordingClient::new(client, path.clone());
                let out = f(&rec);
                rec.save()?;
                out
            }
            _ => f(client.as_ref()),
        }
    }

    /// Writes a synthetic train and test split to the dataset root.
    pub fn synth(&self) -> Result<String> {
        let feat = self.featurizer();
        let world = WorldConfig::default();
        let mut parts = Vec::new();
        for (split, n) in [(Split::Train, self.cfg.synth.train_videos), (Split::Test, self.cfg.synth.test_videos)] {
            let s = generate_split(&world, &feat, split, n, self.cfg.seed)?;
            if !self.dry_run {
                write_split(self.root(), split, &s.videos, &s.samples, &s.manifest)?;
            }
            parts.push(format!("{} {} samples", s.samples.len(), split.as_str()));
        }
        Ok(format!("synth: {} in {}", parts.join(", "), self.root().display()))
    }

    /// Reads every `*.toml` video document in `input` (sorted by name) and
    /// writes one sample per masked event.
    pub fn ingest(&self, input: &Path, split: Split) -> Result<String> {
        let rd = fs::read_dir(input).map_err(|e| IoError::at(input, e))?;
        let mut files: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        let videos = files.iter().map(|p| load_video(p)).collect::<Result<Vec<_>>>()?;
        let (samples, manifest) = build_var_split(&videos, split)?;
        if !self.dry_run {
            write_split(self.root(), split, &videos, &samples, &manifest)?;
        }
        Ok(format!(
            "ingest: {} samples from {} videos ({} skipped) into {} split",
            samples.len(),
            videos.len(),
            manifest.warnings(),
            split.as_str()
        ))
    }

    pub fn gen_negatives(&self) -> Result<String> {
        let train = self.load(Split::Train)?;
        let cfg = GenerationConfig::new(self.cfg.hypotheses.negatives, self.cfg.hypotheses.negative_temperature);
        self.with_client(|client| {
            if self.dry_run {
                return Ok(format!("dry run: {} training samples, negatives ok", train.len()));
            }
            let mut cache = self.read_captions()?;
            let mut sets = BTreeMap::new();
            let mut deficient = 0;
            for s in &train {
                let caps = self.captions(s, &mut cache, Some(client))?;
                let pos = s
                    .explanation
                    .as_deref()
                    .ok_or_else(|| IoError::Config(format!("{}: training sample without explanation", s.sample_id)))?;
                let g = generate_negatives(&s.sample_id, pos, &caps, client, &cfg)?;
                deficient += usize::from(g.deficient);
                sets.insert(s.sample_id.clone(), g.set);
            }
            self.begin()?;
            self.write_captions(&cache)?;
            write_hypotheses(&self.run("negatives.jsonl"), &sets)?;
            Ok(format!("gen-negatives: {} samples, {deficient} deficient", sets.len()))
        })
    }

    pub fn gen_hypotheses(&self) -> Result<String> {
        let splits = self.splits_present();
        if splits.is_empty() {
            return Err(missing(&manifest_path(self.root(), Split::Train), "run `ingest` or `synth` first"));
        }
        let samples = splits.iter().map(|s| self.load(*s)).collect::<Result<Vec<_>>>()?.concat();
        let cfg = GenerationConfig::new(self.cfg.hypotheses.candidates, self.cfg.hypotheses.temperature);
        self.with_client(|client| {
            if self.dry_run {
                return Ok(format!("dry run: {} samples, candidates ok", samples.len()));
            }
            let mut cache = self.read_captions()?;
            let mut sets = BTreeMap::new();
            let mut deficient = 0;
            for s in &samples {
                let caps = self.captions(s, &mut cache, Some(client))?;
                let g = generate_candidates(&s.sample_id, &caps, s.mask_index, client, &cfg)?;
                deficient += usize::from(g.deficient);
                sets.insert(s.sample_id.clone(), g.set);
            }
            self.begin()?;
            self.write_captions(&cache)?;
            write_hypotheses(&self.run("candidates.jsonl"), &sets)?;
            Ok(format!("gen-hypotheses: {} samples, {deficient} deficient", sets.len()))
        })
    }

    pub fn train_contrast(&self) -> Result<String> {
        let train = self.load(Split::Train)?;
        let negatives = self.read_sets("negatives.jsonl", "run `gen-negatives` first")?;
        let cc = self.cfg.contrast_config();
        if self.dry_run {
            return Ok(format!("dry run: contrast training on {} samples ok", train.len()));
        }
        self.begin()?;
        let feat = self.featurizer();
        let mut log = String::from("epoch\tmean_loss\taccuracy\n");
        let mut err = None;
        let trained = train_contrast_with(&train, &negatives, &feat, &cc, |rec, model| {
            log.push_str(&format!("{}\t{:.6}\t{:.6}\n", rec.epoch, rec.mean_loss, rec.accuracy));
            let meta = self.contrast_meta(model, rec.epoch, rec.accuracy);
            keep_first(&mut err, save_checkpoint(&self.run(&format!("contrast/epoch-{:03}", rec.epoch)), &model.store, &meta));
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        write_text(&self.run("contrast.log.tsv"), &log)?;
        let best = &trained.history[trained.best_epoch];
        let meta = self.contrast_meta(&trained.model, best.epoch, best.accuracy);
        save_checkpoint(&self.run("contrast/best"), &trained.model.store, &meta)?;
        Ok(format!("train-contrast: best epoch {} accuracy {:.4}", best.epoch, best.accuracy))
    }

    fn contrast_meta(&self, model: &ContrastModel, epoch: usize, accuracy: f64) -> Meta {
        let mut m = Meta::new();
        m.insert("d_img".into(), (model.visual.d_img as i64).into());
        m.insert("d_txt".into(), (self.cfg.text_dim as i64).into());
        m.insert("d_joint".into(), (self.cfg.contrast.d_joint as i64).into());
        m.insert("tau".into(), model.tau.into());
        m.insert("epoch".into(), (epoch as i64).into());
        m.insert("accuracy".into(), accuracy.into());
        m
    }

    fn load_contrast(&self) -> Result<ContrastModel> {
        let dir = self.run("contrast/best");
        if !dir.join("index.tsv").is_file() {
            return Err(missing(&dir, "run `train-contrast` first"));
        }
        let (store, meta) = load_checkpoint(&dir)?;
        let d_img = meta_int(&meta, "d_img").ok_or_else(|| IoError::doc(&dir.join("meta.toml"), "missing d_img"))?;
        let mut model = ContrastModel::new(d_img, self.cfg.text_dim, &self.cfg.contrast_config())?;
        model.store.load_from(&store)?;
        Ok(model)
    }

    pub fn select(&self) -> Result<String> {
        let candidates = self.read_sets("candidates.jsonl", "run `gen-hypotheses` first")?;
        let model = self.load_contrast()?;
        let samples = self.splits_present().iter().map(|s| self.load(*s)).collect::<Result<Vec<_>>>()?.concat();
        if self.dry_run {
            return Ok(format!("dry run: selection over {} samples ok", samples.len()));
        }
        let feat = self.featurizer();
        let mut out = BTreeMap::new();
        let mut short = 0;
        for s in &samples {
            let Some(c) = candidates.get(&s.sample_id) else {
                log::warn!("{}: no candidates", s.sample_id);
                continue;
            };
            let sel = select_topk(c, &partition_segments(s), &model, &feat, self.cfg.hypotheses.k)?;
            short += usize::from(sel.k_exceeded);
            out.insert(s.sample_id.clone(), sel.set);
        }
        self.begin()?;
        write_hypotheses(&self.run("topk.jsonl"), &out)?;
        Ok(format!("select: top-{} for {} samples ({short} with fewer candidates)", self.cfg.hypotheses.k, out.len()))
    }

    fn topk(&self) -> Result<Option<BTreeMap<String, HypothesisSet>>> {
        if !self.cfg.hypotheses.enabled {
            return Ok(None);
        }
        self.read_sets("topk.jsonl", "run `select` first or set hypotheses.enabled = false").map(Some)
    }

    fn hyps(topk: &Option<BTreeMap<String, HypothesisSet>>, id: &str) -> HypothesisSet {
        match topk.as_ref().and_then(|t| t.get(id)) {
            Some(h) => h.clone(),
            None => {
                if topk.is_some() {
                    log::warn!("{id}: no selected hypotheses");
                }
                HypothesisSet::new(id)
            }
        }
    }

    fn assemble_options(&self) -> AssembleOptions {
        AssembleOptions {
            placeholder_len: self.cfg.reasoner.placeholder_len,
            seed: self.cfg.seed,
            ..AssembleOptions::default()
        }
    }

    fn train_tokenizer(&self, train: &[Sample], cache: &BTreeMap<String, Vec<String>>, topk: &Option<BTreeMap<String, HypothesisSet>>) -> Tokenizer {
        let mut texts: Vec<String> = vec![REASONER_TEMPLATE.to_string(), DEFAULT_QUERY.to_string()];
        for s in train {
            texts.extend(s.explanation.clone());
            texts.extend(s.events.iter().filter_map(|e| e.caption.clone()));
            texts.extend(cache.get(&s.sample_id).into_iter().flatten().cloned());
            if let Some(t) = topk.as_ref().and_then(|t| t.get(&s.sample_id)) {
                texts.extend(t.texts().into_iter().map(str::to_string));
            }
        }
        Tokenizer::train(texts.iter().map(String::as_str), self.cfg.reasoner.vocab_size)
    }

    fn load_tokenizer(&self) -> Result<Tokenizer> {
        let p = self.run("tokenizer.txt");
        if !p.is_file() {
            return Err(missing(&p, "run `train-stage1` first"));
        }
        let text = fs::read_to_string(&p).map_err(|e| IoError::at(&p, e))?;
        Tokenizer::from_text(&text).map_err(|e| IoError::doc(&p, e.to_string()))
    }

    fn new_model(&self, tokenizer: &Tokenizer, d_img: Option<usize>) -> Result<AbductiveModel> {
        let cfg = ModelConfig {
            reasoner: self.cfg.reasoner_config(tokenizer.vocab_size(), d_img),
            imaginer: self.cfg.imaginer_config(),
            bridge_hidden: self.cfg.imaginer.bridge_hidden,
            seed: self.cfg.seed,
        };
        Ok(AbductiveModel::new(cfg, tokenizer.clone())?)
    }

    fn model_meta(&self, model: &AbductiveModel, stage: &str, epoch: usize) -> Meta {
        let mut m = Meta::new();
        m.insert("stage".into(), stage.into());
        m.insert("epoch".into(), (epoch as i64).into());
        m.insert("seed".into(), (self.cfg.seed as i64).into());
        m.insert("vocab_size".into(), (model.tokenizer.vocab_size() as i64).into());
        if let Some(d) = model.cfg.reasoner.d_img {
            m.insert("d_img".into(), (d as i64).into());
        }
        m.insert("alpha".into(), self.cfg.training.alpha.into());
        m.insert("timesteps".into(), (self.cfg.imaginer.timesteps as i64).into());
        m.insert("beta_start".into(), self.cfg.imaginer.beta_start.into());
        m.insert("beta_end".into(), self.cfg.imaginer.beta_end.into());
        m.insert("gamma_snr".into(), self.cfg.imaginer.gamma_snr.into());
        m
    }

    fn examples(&self, model: &AbductiveModel, train: &[Sample], cache: &mut BTreeMap<String, Vec<String>>, topk: &Option<BTreeMap<String, HypothesisSet>>) -> Result<Vec<TrainingExample>> {
        let d_img = model
            .cfg
            .reasoner
            .d_img
            .ok_or_else(|| IoError::Config("training needs per-frame features on the samples".into()))?;
        let icfg = self.cfg.imaginer_config();
        let feat = self.featurizer();
        let embedder = ConditionEmbedder::new(d_img, self.cfg.text_dim, icfg.unet.d_visual, self.cfg.seed ^ 0xE3B);
        let mapper = LatentMapper::new(icfg.unet.latent_hw, icfg.unet.latent_channels, self.cfg.seed ^ 0x1A7);
        let builder = ExampleBuilder {
            tokenizer: &model.tokenizer,
            featurizer: &feat,
            embedder: &embedder,
            mapper: &mapper,
            assemble: self.assemble_options(),
            m_local: icfg.m_local,
            latent_frames: icfg.diffusion.latent_frames,
        };
        train
            .iter()
            .map(|s| {
                let caps = self.captions(s, cache, None)?;
                Ok(builder.build(s, &caps, &Self::hyps(topk, &s.sample_id))?)
            })
            .collect()
    }

    /// Runs one pipeline stage, logging scalars and checkpointing each epoch
    /// under `dir`, then saving `dir/final`.
    fn stage(&self, stage: Stage, tag: u64, model: &mut AbductiveModel, examples: &[TrainingExample], dir: &str, name: &str, stage1: Option<&Stage1Checkpoints>) -> Result<usize> {
        let plan = self.cfg.train_plan(stage, tag);
        let mut log = ScalarLog::new();
        let mut err = None;
        let on_event = |ev: TrainEvent| match ev {
            TrainEvent::Step(r) => log.push(r),
            TrainEvent::Epoch { epoch, model } => {
                let meta = self.model_meta(model, name, epoch);
                keep_first(&mut err, save_checkpoint(&self.run(&format!("{dir}/epoch-{epoch:03}")), &model.store, &meta));
            }
        };
        let report = match stage1 {
            None => match run_stage1_with(&plan, Stage1Input::Pipeline { model, examples }, on_event)? {
                abductive_core::training::Stage1Output::Pipeline(r) => r,
                abductive_core::training::Stage1Output::Contrast(_) => unreachable!("pipeline input yields a pipeline report"),
            },
            Some(ck) => run_stage2_with(&plan, model, examples, ck, on_event)?,
        };
        if let Some(e) = err {
            return Err(e);
        }
        write_text(&self.run(&format!("scalars.{name}.tsv")), &log.0)?;
        let meta = self.model_meta(model, name, report.epochs_completed);
        save_checkpoint(&self.run(&format!("{dir}/final")), &model.store, &meta)?;
        Ok(report.records.len())
    }

    pub fn train_stage1(&self) -> Result<String> {
        let train = self.load(Split::Train)?;
        let topk = self.topk()?;
        let mut cache = self.read_captions()?;
        let d_img = train.iter().find_map(Sample::feature_dim);
        if self.dry_run {
            return Ok(format!("dry run: stage I on {} samples ok", train.len()));
        }
        self.begin()?;
        let tokenizer = self.train_tokenizer(&train, &cache, &topk);
        write_text(&self.run("tokenizer.txt"), &tokenizer.to_text())?;
        let mut model = self.new_model(&tokenizer, d_img)?;
        let examples = self.examples(&model, &train, &mut cache, &topk)?;
        let steps = self.stage(Stage::IReasoner, 0x51, &mut model, &examples, "stage1/reasoner", "stage1_reasoner", None)?;
        let mut msg = format!("train-stage1: reasoner {steps} steps");
        if self.cfg.training.use_imaginer {
            let steps = self.stage(Stage::IImaginer, 0x52, &mut model, &examples, "stage1/imaginer", "stage1_imaginer", None)?;
            msg.push_str(&format!(", imaginer {steps} steps"));
        }
        Ok(msg)
    }

    fn load_stage1(&self, which: &str) -> Result<abductive_core::ParamStore> {
        let dir = self.run(&format!("stage1/{which}/final"));
        if !dir.join("index.tsv").is_file() {
            return Err(missing(&dir, "run `train-stage1` first"));
        }
        Ok(load_checkpoint(&dir)?.0)
    }

    pub fn train_stage2(&self) -> Result<String> {
        let train = self.load(Split::Train)?;
        let topk = self.topk()?;
        let tokenizer = self.load_tokenizer()?;
        let checkpoints = Stage1Checkpoints {
            reasoner: Some(self.load_stage1("reasoner")?),
            imaginer: match self.cfg.training.use_imaginer {
                true => Some(self.load_stage1("imaginer")?),
                false => None,
            },
        };
        if self.dry_run {
            return Ok(format!("dry run: stage II on {} samples ok", train.len()));
        }
        self.begin()?;
        let mut cache = self.read_captions()?;
        let d_img = train.iter().find_map(Sample::feature_dim);
        let mut model = self.new_model(&tokenizer, d_img)?;
        let examples = self.examples(&model, &train, &mut cache, &topk)?;
        let steps = self.stage(Stage::IIJoint, 0x53, &mut model, &examples, "stage2", "stage2", Some(&checkpoints))?;
        let meta = self.model_meta(&model, "final", self.cfg.training.stage2_epochs);
        save_checkpoint(&self.run("model"), &model.store, &meta)?;
        Ok(format!("train-stage2: {steps} joint steps"))
    }

    /// The final joint model, rebuilt from the tokenizer and the checkpoint.
    pub fn load_model(&self) -> Result<AbductiveModel> {
        let dir = self.run("model");
        if !dir.join("index.tsv").is_file() {
            return Err(missing(&dir, "run `train-stage2` first"));
        }
        let tokenizer = self.load_tokenizer()?;
        let (store, meta) = load_checkpoint(&dir)?;
        let mut model = self.new_model(&tokenizer, meta_int(&meta, "d_img"))?;
        model.store.load_from(&store)?;
        Ok(model)
    }

    fn resolve_sample(&self, sample: &str) -> Result<Sample> {
        let p = Path::new(sample);
        if p.is_file() {
            return load_sample(p);
        }
        let by_id = sample_path(self.root(), sample);
        if by_id.is_file() {
            return load_sample(&by_id);
        }
        Err(IoError::Config(format!("sample `{sample}`: neither a file nor a sample id under {}", self.root().display())))
    }

    fn predict(&self, model: &AbductiveModel, s: &Sample, topk: &Option<BTreeMap<String, HypothesisSet>>, cache: &mut BTreeMap<String, Vec<String>>) -> Result<InferRecord> {
        let caps = self.captions(s, cache, None)?;
        let hyps = Self::hyps(topk, &s.sample_id);
        let input = assemble_input(s, &caps, &hyps, &model.tokenizer, &self.assemble_options())?;
        Ok(InferRecord {
            sample_id: s.sample_id.clone(),
            prediction: model.predict(&input)?,
            hypotheses: hyps.texts().into_iter().map(str::to_string).collect(),
        })
    }

    pub fn infer(&self, sample: &str) -> Result<InferRecord> {
        let s = self.resolve_sample(sample)?;
        let model = self.load_model()?;
        let topk = if self.cfg.hypotheses.enabled && self.run("topk.jsonl").is_file() { self.topk()? } else { None };
        let mut cache = self.read_captions()?;
        let rec = self.predict(&model, &s, &topk, &mut cache)?;
        if !self.dry_run {
            let json = serde_json::to_string_pretty(&rec).map_err(|e| IoError::Format(e.to_string()))?;
            write_text(&self.run(&format!("outputs/{}.json", s.sample_id)), &(json + "\n"))?;
        }
        Ok(rec)
    }

    /// Scores the final model on the test split.
    pub fn evaluate_model(&self) -> Result<EvalReport> {
        let test = self.load(Split::Test)?;
        let model = self.load_model()?;
        let topk = self.topk()?;
        let mut cache = self.read_captions()?;
        let mut pairs = Vec::with_capacity(test.len());
        let mut preds = String::new();
        for s in &test {
            let reference = s
                .explanation
                .clone()
                .ok_or_else(|| IoError::Config(format!("{}: test sample without explanation", s.sample_id)))?;
            let rec = self.predict(&model, s, &topk, &mut cache)?;
            preds.push_str(&format!("{}\t{}\n", s.sample_id, rec.prediction.text));
            pairs.push(EvalPair::new(s.sample_id.clone(), rec.prediction.text, vec![reference])?);
        }
        let report = evaluate(&pairs, &[])?;
        if !self.dry_run {
            write_text(&self.run("predictions.tsv"), &preds)?;
            self.write_report(&self.cfg.paths.run_dir, &report)?;
        }
        Ok(report)
    }

    pub fn write_report(&self, dir: &Path, report: &EvalReport) -> Result<()> {
        write_text(&dir.join("report.txt"), &report.to_table())?;
        let json = serde_json::to_string_pretty(report).map_err(|e| IoError::Format(e.to_string()))?;
        write_text(&dir.join("report.json"), &(json + "\n"))
    }
}

/// Reads `sample_id<TAB>text` lines; repeated ids collect several texts.
pub fn read_text_table(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, t) = line
            .split_once('\t')
            .ok_or_else(|| IoError::doc(path, format!("line {}: expected `sample_id<TAB>text`", n + 1)))?;
        out.entry(id.to_string()).or_default().push(t.to_string());
    }
    Ok(out)
}

/// Pairs predictions with references by sample id. Every prediction needs
/// at least one reference and exactly one candidate.
pub fn pair_files(pred: &Path, refs: &Path) -> Result<Vec<EvalPair>> {
    let preds = read_text_table(pred)?;
    let mut refs = read_text_table(refs)?;
    preds
        .into_iter()
        .map(|(id, mut cands)| {
            if cands.len() != 1 {
                return Err(IoError::doc(pred, format!("{id}: {} predictions", cands.len())));
            }
            let r = refs.remove(&id).ok_or_else(|| IoError::doc(pred, format!("{id}: no reference")))?;
            Ok(EvalPair::new(id, cands.remove(0), r)?)
        })
        .collect()
}

/// Writes a text table in the format [`read_text_table`] reads.
pub fn write_text_table(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| IoError::at(path, e))?;
    for (id, t) in rows {
        writeln!(f, "{id}\t{t}").map_err(|e| IoError::at(path, e))?;
    }
    Ok(())
}
