//! Joint causal space: visual/text encoders, the contrastive objective,
//! relevance scoring and top-k hypothesis selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Ctx, Graph, Var};
use crate::data::{partition_segments, Event, Sample, SegmentPartition};
use crate::error::{Error, Result};
use crate::hypothesis::HypothesisSet;
use crate::math;
use crate::nn::{self, Activation, EncoderLayer, Linear, Mlp2};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamGrads, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::text::TextFeaturizer;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub d_joint: usize,
    pub d_model: usize,
    pub heads: usize,
    pub text_hidden: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            negatives_per_positive: 100,
            epochs: 10,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            d_joint: 256,
            d_model: 64,
            heads: 4,
            text_hidden: 256,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::validation("temperature must be > 0"));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::validation("negatives_per_positive must be >= 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be >= 1"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::validation("d_model must be divisible by heads"));
        }
        Ok(())
    }
}

/// Per-frame features -> 2 transformer encoder layers -> mean pool -> linear
/// -> unit norm. Both encoders emit unit vectors so that neither side of
/// `x_initial + x_hyp` dominates the composite.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    pub proj: Linear,
    pub d_img: usize,
    pub d_model: usize,
    pub d_joint: usize,
    pub heads: usize,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, d_img: usize, cfg: &ContrastConfig, rng: &mut Rng64) -> Self {
        let layers = (0..2)
            .map(|i| EncoderLayer::new(store, &format!("visual.layer{i}"), cfg.d_model, cfg.heads, 2, rng))
            .collect();
        Self {
            input: Linear::new(store, "visual.input", d_img, cfg.d_model, true, rng),
            layers,
            proj: Linear::new(store, "visual.proj", cfg.d_model, cfg.d_joint, true, rng),
            d_img,
            d_model: cfg.d_model,
            d_joint: cfg.d_joint,
            heads: cfg.heads,
        }
    }

    /// Encodes a segment to a `(d_joint)` node; an empty segment is the zero
    /// vector.
    pub fn forward(&self, cx: &Ctx, segment: &[Event]) -> Result<Var> {
        if segment.is_empty() {
            return Ok(cx.g.constant(Tensor::zeros(vec![self.d_joint])));
        }
        let mut rows = Vec::with_capacity(segment.len());
        for ev in segment {
            let f = ev
                .frame_features
                .as_ref()
                .ok_or_else(|| Error::precondition(format!("event {} has no frame features", ev.event_id)))?;
            if f.dim(1) != self.d_img {
                return Err(Error::shape(format!(
                    "event {}: feature dim {} but encoder expects {}",
                    ev.event_id,
                    f.dim(1),
                    self.d_img
                )));
            }
            rows.push(f.clone());
        }
        let feats = Tensor::cat_rows(&rows)?;
        let n = feats.dim(0);
        let g = cx.g;
        let h = self.input.forward(cx, g.constant(feats));
        let h = g.add(h, g.constant(nn::sinusoidal(&nn::positions(n), self.d_model)));
        let mut h = g.reshape(h, &[1, n, self.d_model]);
        for layer in &self.layers {
            h = layer.forward(cx, h, None);
        }
        let pooled = g.mean_rows(g.reshape(h, &[n, self.d_model]));
        let pooled = g.reshape(pooled, &[1, self.d_model]);
        let z = g.normalize_rows(self.proj.forward(cx, pooled));
        Ok(g.reshape(z, &[self.d_joint]))
    }
}

/// Two-layer MLP from text features into the joint space.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub mlp: Mlp2,
    pub d_txt: usize,
    pub d_joint: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, d_txt: usize, cfg: &ContrastConfig, rng: &mut Rng64) -> Self {
        Self {
            mlp: Mlp2::new(store, "text", d_txt, cfg.text_hidden, cfg.d_joint, Activation::Gelu, rng),
            d_txt,
            d_joint: cfg.d_joint,
        }
    }

    /// `(n, d_txt)` features to unit `(n, d_joint)` embeddings.
    pub fn forward(&self, cx: &Ctx, feats: Var) -> Var {
        cx.g.normalize_rows(self.mlp.forward(cx, feats))
    }
}

#[derive(Debug, Clone)]
pub struct ContrastModel {
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub tau: f64,
}

/// Anchor (`X_I`) and target (`X_F`) embeddings of a sample.
#[derive(Debug, Clone, Copy)]
pub struct SegmentVars {
    pub anchor: Var,
    pub target: Var,
}

impl ContrastModel {
    pub fn new(d_img: usize, d_txt: usize, cfg: &ContrastConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng64::stream(cfg.seed, 0xC0);
        let mut store = ParamStore::new();
        let visual = VisualEncoder::new(&mut store, d_img, cfg, &mut rng);
        let text = TextEncoder::new(&mut store, d_txt, cfg, &mut rng);
        Ok(Self {
            store,
            visual,
            text,
            tau: cfg.tau,
        })
    }

    /// `X_I` and `X_F` for a partition. When the final segment is empty
    /// the roles mirror: the (empty) final side becomes the anchor and the
    /// initial segment the target, so the score stays defined.
    pub fn segment_vars(&self, cx: &Ctx, p: &SegmentPartition) -> Result<SegmentVars> {
        if p.final_.is_empty() {
            Ok(SegmentVars {
                anchor: self.visual.forward(cx, p.final_)?,
                target: self.visual.forward(cx, p.initial)?,
            })
        } else {
            Ok(SegmentVars {
                anchor: self.visual.forward(cx, p.initial)?,
                target: self.visual.forward(cx, p.final_)?,
            })
        }
    }

    pub fn encode_visual(&self, segment: &[Event]) -> Result<Vec<f64>> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let v = self.visual.forward(&cx, segment)?;
        Ok(g.value(v).into_data())
    }

    pub fn encode_texts(&self, featurizer: &dyn TextFeaturizer, texts: &[&str]) -> Result<Tensor> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let feats = text_features(featurizer, texts, self.text.d_txt)?;
        Ok(g.value(self.text.forward(&cx, g.constant(feats))))
    }

    /// Relevance of each text as an explanation for the partition's gap.
    pub fn score_texts(
        &self,
        featurizer: &dyn TextFeaturizer,
        partition: &SegmentPartition,
        texts: &[&str],
    ) -> Result<Vec<f64>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let sv = self.segment_vars(&cx, partition)?;
        let anchor = g.value(sv.anchor);
        let target = g.value(sv.target);
        let hyp = self.encode_texts(featurizer, texts)?;
        (0..texts.len())
            .map(|i| relevance_score(anchor.data(), hyp.row(i), target.data()))
            .collect()
    }
}

fn text_features(featurizer: &dyn TextFeaturizer, texts: &[&str], d_txt: usize) -> Result<Tensor> {
    if featurizer.dim() != d_txt {
        return Err(Error::shape(format!("featurizer dim {} != text encoder dim {d_txt}", featurizer.dim())));
    }
    let mut data = Vec::with_capacity(texts.len() * d_txt);
    for t in texts {
        data.extend(featurizer.featurize(t));
    }
    Tensor::new(vec![texts.len(), d_txt], data)
}

fn check_nonzero(v: &[f64], what: &str) -> Result<()> {
    if math::norm(v) == 0.0 {
        return Err(Error::domain(format!("{what} has zero norm; cosine undefined")));
    }
    Ok(())
}

/// `cos(x_initial + x_hyp, x_final)`.
pub fn relevance_score(x_initial: &[f64], x_hyp: &[f64], x_final: &[f64]) -> Result<f64> {
    if x_initial.len() != x_hyp.len() || x_hyp.len() != x_final.len() {
        return Err(Error::shape("relevance_score dimension mismatch"));
    }
    let comp: Vec<f64> = x_initial.iter().zip(x_hyp).map(|(a, b)| a + b).collect();
    check_nonzero(&comp, "composite embedding")?;
    check_nonzero(x_final, "final embedding")?;
    let c = math::dot(&comp, x_final) / (math::norm(&comp) * math::norm(x_final));
    Ok(c.clamp(-1.0, 1.0))
}

/// Contrastive loss with the positive in row 0 of `candidates (1 + M, d)`.
pub fn contrast_loss_rows(g: &Graph, anchor: Var, target: Var, candidates: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::precondition("temperature must be > 0"));
    }
    let shape = g.shape(candidates);
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::precondition("need a positive and at least one negative"));
    }
    let d = shape[1];
    if g.shape(anchor) != [d] || g.shape(target) != [d] {
        return Err(Error::shape("contrast_loss dimension mismatch"));
    }
    let comp = g.add_row(candidates, anchor);
    {
        let cv = g.value_ref(comp);
        for r in 0..shape[0] {
            check_nonzero(cv.row(r), "composite embedding")?;
        }
        check_nonzero(g.value_ref(target).data(), "final embedding")?;
    }
    let logits = g.scale(g.cosine_rows(comp, target), 1.0 / tau);
    let logp = g.log_softmax(logits);
    Ok(g.neg(g.narrow(logp, 0, 0, 1)))
}

/// `-log softmax` of the positive's logit over the positive plus `M`
/// negatives, each logit `cos(x_initial + x, x_final) / tau`.
pub fn contrast_loss(g: &Graph, x_initial: Var, x_final: Var, x_pos: Var, x_negs: &[Var], tau: f64) -> Result<Var> {
    if x_negs.is_empty() {
        return Err(Error::precondition("contrast_loss needs M >= 1 negatives"));
    }
    let d = g.shape(x_pos).iter().product::<usize>();
    let rows: Vec<Var> = core::iter::once(x_pos)
        .chain(x_negs.iter().copied())
        .map(|v| {
            if g.shape(v).iter().product::<usize>() != d {
                return Err(Error::shape("contrast_loss dimension mismatch"));
            }
            Ok(g.reshape(v, &[1, d]))
        })
        .collect::<Result<_>>()?;
    contrast_loss_rows(g, x_initial, x_final, g.concat(&rows, 0), tau)
}

/// Softmax probabilities of the positive followed by each negative.
pub fn contrast_probabilities(x_initial: &[f64], x_final: &[f64], x_pos: &[f64], x_negs: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    let mut logits = vec![relevance_score(x_initial, x_pos, x_final)? / tau];
    for n in x_negs {
        logits.push(relevance_score(x_initial, n, x_final)? / tau);
    }
    let lse = math::logsumexp(&logits);
    Ok(logits.iter().map(|l| math::exp(l - lse)).collect())
}

/// Indices of the `k` highest scores, descending, ties kept in input order.
pub fn rank_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(core::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub set: HypothesisSet,
    pub indices: Vec<usize>,
    /// Set when `k` exceeded the number of candidates.
    pub k_exceeded: bool,
}

/// Keeps the `k` candidates from pre-computed `scores`, attaching scores.
pub fn select_by_scores(candidates: &HypothesisSet, scores: &[f64], k: usize) -> Result<Selection> {
    if scores.len() != candidates.len() {
        return Err(Error::shape("one score per candidate required"));
    }
    let k_exceeded = k > candidates.len();
    if k_exceeded {
        log::warn!(
            "{}: k={k} exceeds {} candidates; returning all",
            candidates.source_sample_id,
            candidates.len()
        );
    }
    let indices = rank_topk(scores, k);
    let mut set = HypothesisSet::new(candidates.source_sample_id.clone());
    for &i in &indices {
        let h = &candidates.hypotheses[i];
        set.push(h.text.clone(), h.provenance, Some(scores[i]))?;
    }
    Ok(Selection { set, indices, k_exceeded })
}

pub fn select_topk(
    candidates: &HypothesisSet,
    partition: &SegmentPartition,
    model: &ContrastModel,
    featurizer: &dyn TextFeaturizer,
    k: usize,
) -> Result<Selection> {
    let scores = model.score_texts(featurizer, partition, &candidates.texts())?;
    select_by_scores(candidates, &scores, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ContrastTraining {
    /// Weights from the epoch with the highest training accuracy (earliest
    /// on ties).
    pub model: ContrastModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

struct Prepared<'a> {
    sample: &'a Sample,
    texts: Vec<&'a str>,
}

fn prepare<'a>(
    samples: &'a [Sample],
    negatives: &'a BTreeMap<String, HypothesisSet>,
    m: usize,
) -> Result<Vec<Prepared<'a>>> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    samples
        .iter()
        .map(|s| {
            let pos = s
                .explanation
                .as_deref()
                .ok_or_else(|| Error::precondition(format!("{}: no explanation", s.sample_id)))?;
            let negs = negatives
                .get(&s.sample_id)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| Error::precondition(format!("{}: no negatives", s.sample_id)))?;
            let mut texts = vec![pos];
            texts.extend(negs.hypotheses.iter().take(m).map(|h| h.text.as_str()));
            Ok(Prepared { sample: s, texts })
        })
        .collect()
}

/// Fraction of samples whose positive strictly outranks every negative.
pub fn training_accuracy(
    model: &ContrastModel,
    featurizer: &dyn TextFeaturizer,
    samples: &[Sample],
    negatives: &BTreeMap<String, HypothesisSet>,
    m: usize,
) -> Result<f64> {
    let prepared = prepare(samples, negatives, m)?;
    accuracy_of(model, featurizer, &prepared)
}

fn accuracy_of(model: &ContrastModel, featurizer: &dyn TextFeaturizer, prepared: &[Prepared]) -> Result<f64> {
    let mut hits = 0;
    for p in prepared {
        let scores = model.score_texts(featurizer, &partition_segments(p.sample), &p.texts)?;
        if scores[1..].iter().all(|s| scores[0] > *s) {
            hits += 1;
        }
    }
    Ok(hits as f64 / prepared.len() as f64)
}

pub fn train_contrast(
    samples: &[Sample],
    negatives: &BTreeMap<String, HypothesisSet>,
    featurizer: &dyn TextFeaturizer,
    cfg: &ContrastConfig,
) -> Result<ContrastTraining> {
    train_contrast_with(samples, negatives, featurizer, cfg, |_, _| {})
}

/// As [`train_contrast`], calling `on_epoch` with each epoch's record and
/// weights (used for per-epoch checkpoints).
pub fn train_contrast_with(
    samples: &[Sample],
    negatives: &BTreeMap<String, HypothesisSet>,
    featurizer: &dyn TextFeaturizer,
    cfg: &ContrastConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ContrastModel),
) -> Result<ContrastTraining> {
    cfg.validate()?;
    let prepared = prepare(samples, negatives, cfg.negatives_per_positive)?;
    let d_img = samples
        .iter()
        .find_map(Sample::feature_dim)
        .ok_or_else(|| Error::precondition("no frame features in corpus"))?;
    let mut model = ContrastModel::new(d_img, featurizer.dim(), cfg)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    let mut rng = Rng64::stream(cfg.seed, 0xC1);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::new();
            for &i in batch {
                let p = &prepared[i];
                let g = Graph::new();
                let cx = Ctx::new(&g, &model.store);
                let sv = model.segment_vars(&cx, &partition_segments(p.sample))?;
                let feats = text_features(featurizer, &p.texts, model.text.d_txt)?;
                let cands = model.text.forward(&cx, g.constant(feats));
                let loss = contrast_loss_rows(&g, sv.anchor, sv.target, cands, model.tau)?;
                total += g.item(loss);
                grads.accumulate(&g.backward(loss).param_grads());
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.store, &grads);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / prepared.len() as f64,
            accuracy: accuracy_of(&model, featurizer, &prepared)?,
        };
        log::info!("contrast epoch {epoch}: loss {:.4} acc {:.3}", record.mean_loss, record.accuracy);
        on_epoch(&record, &model);
        if best.as_ref().map_or(true, |(acc, _, _)| record.accuracy > *acc) {
            best = Some((record.accuracy, epoch, model.store.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, store) = best.expect("epochs >= 1");
    model.store = store;
    Ok(ContrastTraining {
        model,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_error};
    use crate::hypothesis::Provenance;
    use crate::text::HashingFeaturizer;
    use alloc::string::ToString;

    fn v(g: &Graph, xs: &[f64]) -> Var {
        g.leaf(Tensor::vector(xs.to_vec()))
    }

    #[test]
    fn all_equal_embeddings_give_ln_m_plus_one() {
        let g = Graph::new();
        let e = [0.3, -1.2, 0.8];
        for m in [2usize, 5, 20] {
            let negs: Vec<Var> = (0..m).map(|_| v(&g, &e)).collect();
            let loss = contrast_loss(&g, v(&g, &[1.0, 0.0, 2.0]), v(&g, &[0.1, 0.2, -0.3]), v(&g, &e), &negs, 0.07).unwrap();
            assert!((g.item(loss) - math::ln((m + 1) as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn antipodal_negatives_closed_form() {
        let g = Graph::new();
        let xf = [0.6, 0.8];
        let neg = [-0.6, -0.8];
        let loss = contrast_loss(&g, v(&g, &[0.0, 0.0]), v(&g, &xf), v(&g, &xf), &[v(&g, &neg), v(&g, &neg)], 1.0).unwrap();
        assert!((g.item(loss) - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn zero_composite_is_domain_error() {
        let g = Graph::new();
        let r = contrast_loss(&g, v(&g, &[1.0, 0.0]), v(&g, &[1.0, 1.0]), v(&g, &[-1.0, 0.0]), &[v(&g, &[0.0, 1.0])], 0.1);
        assert!(matches!(r, Err(Error::NumericalDomain(_))));
        assert!(relevance_score(&[1.0, 2.0], &[-1.0, -2.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn relevance_parallel_and_orthogonal() {
        assert!((relevance_score(&[1.0, 0.0], &[1.0, 0.0], &[3.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(relevance_score(&[0.0, 1.0], &[0.0, 1.0], &[3.0, 0.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng64::new(5);
        let (d, m) = (8, 4);
        let inputs: Vec<Vec<f64>> = (0..3 + m).map(|_| rng.normals(d)).collect();
        let eval = |xs: &[Vec<f64>]| -> (Graph, Vec<Var>, Var) {
            let g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.leaf(Tensor::vector(x.clone()))).collect();
            let loss = contrast_loss(&g, vars[0], vars[1], vars[2], &vars[3..], 0.5).unwrap();
            (g, vars, loss)
        };
        let (g, vars, loss) = eval(&inputs);
        let grads = g.backward(loss);
        for k in 0..inputs.len() {
            let fd = central_diff(&inputs[k], 1e-6, |x| {
                let mut xs = inputs.clone();
                xs[k] = x.to_vec();
                let (g, _, l) = eval(&xs);
                g.item(l)
            });
            let err = rel_error(grads.wrt(vars[k]).unwrap().data(), &fd);
            assert!(err < 1e-6, "input {k}: {err}");
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = Rng64::new(8);
        let negs: Vec<Vec<f64>> = (0..6).map(|_| rng.normals(5)).collect();
        let p = contrast_probabilities(&rng.normals(5), &rng.normals(5), &rng.normals(5), &negs, 0.07).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_example_and_edges() {
        assert_eq!(rank_topk(&[0.9, 0.1, 0.5, 0.7], 3), vec![0, 3, 2]);
        assert_eq!(rank_topk(&[0.5, 0.5, 0.9], 2), vec![2, 0]);
        let mut set = HypothesisSet::new("s");
        for t in ["a", "b"] {
            set.push(t, Provenance::Candidate, None).unwrap();
        }
        let sel = select_by_scores(&set, &[0.1, 0.2], 0).unwrap();
        assert!(sel.set.is_empty() && !sel.k_exceeded);
        let sel = select_by_scores(&set, &[0.1, 0.2], 3).unwrap();
        assert!(sel.k_exceeded);
        assert_eq!(sel.set.texts(), vec!["b", "a"]);
        assert_eq!(sel.set.hypotheses[0].score, Some(0.2));
    }

    fn feature_event(id: usize, rows: Vec<f64>, d: usize) -> Event {
        Event::new(id, None, Some(Tensor::new(vec![rows.len() / d, d], rows).unwrap()), None).unwrap()
    }

    #[test]
    fn empty_segment_is_zero_and_encoder_deterministic() {
        let cfg = ContrastConfig { d_joint: 8, d_model: 8, heads: 2, text_hidden: 8, ..Default::default() };
        let model = ContrastModel::new(3, 4, &cfg).unwrap();
        assert_eq!(model.encode_visual(&[]).unwrap(), vec![0.0; 8]);
        let a = feature_event(0, vec![0.1, 0.2, 0.3], 3);
        let b = feature_event(1, vec![0.1, 0.2, 0.3], 3);
        assert_eq!(model.encode_visual(&[a.clone()]).unwrap(), model.encode_visual(&[b]).unwrap());
        let wrong = feature_event(2, vec![0.0; 4], 4);
        assert!(model.encode_visual(&[wrong]).is_err());
    }

    #[test]
    fn identical_negative_never_outranked() {
        let cfg = ContrastConfig {
            d_joint: 8,
            d_model: 8,
            heads: 2,
            text_hidden: 8,
            epochs: 1,
            negatives_per_positive: 1,
            ..Default::default()
        };
        let events = vec![feature_event(0, vec![1.0, 0.0], 2), feature_event(1, vec![0.0, 1.0], 2), feature_event(2, vec![1.0, 1.0], 2)];
        let s = Sample::new("s", events, 1, Some("stir the soup".to_string()), None).unwrap();
        let mut negs = BTreeMap::new();
        let mut set = HypothesisSet::new("s");
        set.push("stir the soup", Provenance::Negative, None).unwrap();
        negs.insert("s".to_string(), set);
        let f = HashingFeaturizer::new(16, 0);
        let out = train_contrast(core::slice::from_ref(&s), &negs, &f, &cfg).unwrap();
        assert_eq!(out.history[0].accuracy, 0.0);
        assert!(matches!(train_contrast(&[], &negs, &f, &cfg), Err(Error::EmptyCorpus)));
    }
}
