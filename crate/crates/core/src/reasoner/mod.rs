//! Miniature multimodal encoder-decoder that reads the assembled video and a
//! hypothesis-augmented prompt and writes the explanation.

pub mod prompt;
pub mod video;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Ctx, Graph, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::hypothesis::HypothesisSet;
use crate::nn::{self, DecoderLayer, EncoderLayer, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::text::fnv1a;
use crate::tokenizer::{Tokenizer, BOS, EOS, PAD};

pub use prompt::{build_prompt, prompt_text, DEFAULT_QUERY, REASONER_TEMPLATE};
pub use video::{assemble_video, default_placeholder_len, overlay_event_indices, AssembledVideo, Boundary};

pub const PREFIX: &str = "reasoner";

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    /// `(N, H, W, 3)` with placeholder frames and event-index glyphs.
    pub frames: Tensor,
    /// Event id of every frame (the overlay metadata).
    pub frame_events: Vec<usize>,
    pub boundaries: Vec<Boundary>,
    pub placeholder: (usize, usize),
    /// `(N, D_img)` per-frame features, zero rows where none exist.
    pub features: Option<Tensor>,
    pub prompt_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembleOptions {
    pub placeholder_len: Option<usize>,
    pub seed: u64,
    pub query: String,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            placeholder_len: None,
            seed: 0,
            query: String::from(DEFAULT_QUERY),
        }
    }
}

/// Builds the reasoner input for `sample`: masked video with placeholder
/// frames and overlay, per-frame features, and the prompt tokens. The
/// placeholder pixels are seeded from `opts.seed` and the sample id.
pub fn assemble_input(
    sample: &Sample,
    captions: &[String],
    topk: &HypothesisSet,
    tokenizer: &Tokenizer,
    opts: &AssembleOptions,
) -> Result<AssembledInput> {
    if captions.len() + 1 != sample.num_events() {
        return Err(Error::precondition(format!(
            "{}: {} captions for {} observed events",
            sample.sample_id,
            captions.len(),
            sample.num_events() - 1
        )));
    }
    let len = opts.placeholder_len.unwrap_or_else(|| default_placeholder_len(sample));
    let seed = opts.seed ^ fnv1a(sample.sample_id.as_bytes(), 0x5EED);
    let video = assemble_video(sample, len, seed)?;
    let (frames, frame_events) = overlay_event_indices(&video.frames, &video.boundaries)?;
    let features = sample.feature_dim().map(|d| {
        let mut data = Vec::with_capacity(frames.dim(0) * d);
        for (i, ev) in sample.events.iter().enumerate() {
            let (_, s, e) = video.boundaries[i];
            match (&ev.frame_features, i == sample.mask_index) {
                (Some(f), false) => data.extend_from_slice(f.data()),
                _ => data.extend(core::iter::repeat(0.0).take((e - s) * d)),
            }
        }
        Tensor::from_parts(vec![frames.dim(0), d], data)
    });
    let prompt_tokens = build_prompt(tokenizer, &opts.query, captions, sample.mask_index, topk);
    Ok(AssembledInput {
        frames,
        frame_events,
        boundaries: video.boundaries,
        placeholder: video.placeholder,
        features,
        prompt_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReasonerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    /// Frames are average-pooled to `pool_grid × pool_grid` before embedding.
    pub pool_grid: usize,
    pub d_img: Option<usize>,
    pub max_frames: usize,
    pub max_prompt_tokens: usize,
    pub max_target_tokens: usize,
}

impl ReasonerConfig {
    pub fn new(vocab_size: usize, d_img: Option<usize>) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 2,
            pool_grid: 4,
            d_img,
            max_frames: 64,
            max_prompt_tokens: 384,
            max_target_tokens: 48,
        }
    }
}

/// Which reasoner parameters receive gradients, by name relative to the
/// `reasoner.` prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainableSubset {
    All,
    Prefixes(Vec<String>),
}

impl TrainableSubset {
    pub fn selects(&self, name: &str) -> bool {
        let Some(rel) = name.strip_prefix(PREFIX).and_then(|r| r.strip_prefix('.')) else {
            return false;
        };
        match self {
            TrainableSubset::All => true,
            TrainableSubset::Prefixes(ps) => ps.iter().any(|p| rel.starts_with(p.as_str())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReasonerBackbone {
    pub cfg: ReasonerConfig,
    pub tok_embed: ParamId,
    pub type_embed: ParamId,
    pub pixel_proj: Linear,
    pub feat_proj: Option<Linear>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_ln: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_ln: LayerNorm,
    pub head: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode<'a> {
    Greedy { max_len: usize },
    TeacherForced { target: &'a [u32] },
}

#[derive(Debug, Clone)]
pub struct ReasonerOutput {
    pub tokens: Vec<u32>,
    pub text: String,
    /// `(S, d_model)` decoder hidden states, one row per entry of `tokens`.
    pub c_t: Var,
    /// `(S, vocab)` next-token logits aligned with `tokens`.
    pub logits: Var,
    pub truncated: bool,
}

fn pool_frames(frames: &Tensor, grid: usize) -> Tensor {
    let (n, h, w) = (frames.dim(0), frames.dim(1), frames.dim(2));
    let mut out = Vec::with_capacity(n * grid * grid * 3);
    for f in 0..n {
        for gy in 0..grid {
            let (y0, y1) = (gy * h / grid, ((gy + 1) * h / grid).max(gy * h / grid + 1).min(h));
            for gx in 0..grid {
                let (x0, x1) = (gx * w / grid, ((gx + 1) * w / grid).max(gx * w / grid + 1).min(w));
                let mut acc = [0.0; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let base = ((f * h + y) * w + x) * 3;
                        for c in 0..3 {
                            acc[c] += frames.data()[base + c];
                        }
                    }
                }
                let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                out.extend(acc.iter().map(|a| 2.0 * a / cnt - 1.0));
            }
        }
    }
    Tensor::from_parts(vec![n, grid * grid * 3], out)
}

fn even_subsample(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

impl ReasonerBackbone {
    pub fn new(store: &mut ParamStore, cfg: ReasonerConfig, rng: &mut Rng64) -> Self {
        let d = cfg.d_model;
        let name = |s: &str| format!("{PREFIX}.{s}");
        let tok_embed = store.add_xavier(name("tok_embed"), &[cfg.vocab_size, d], cfg.vocab_size.min(4 * d), d, rng);
        let type_embed = store.add_xavier(name("type_embed"), &[2, d], 2, d, rng);
        let pix = cfg.pool_grid * cfg.pool_grid * 3;
        Self {
            cfg,
            tok_embed,
            type_embed,
            pixel_proj: Linear::new(store, &name("pixel_proj"), pix, d, true, rng),
            feat_proj: cfg.d_img.map(|di| Linear::new(store, &name("feat_proj"), di, d, false, rng)),
            encoder: (0..cfg.enc_layers)
                .map(|i| EncoderLayer::new(store, &name(&format!("enc{i}")), d, cfg.heads, cfg.ffn_mult, rng))
                .collect(),
            enc_ln: LayerNorm::new(store, &name("enc_ln"), d),
            decoder: (0..cfg.dec_layers)
                .map(|i| DecoderLayer::new(store, &name(&format!("dec{i}")), d, cfg.heads, cfg.ffn_mult, rng))
                .collect(),
            dec_ln: LayerNorm::new(store, &name("dec_ln"), d),
            head: Linear::new(store, &name("head"), d, cfg.vocab_size, true, rng),
        }
    }

    /// Encoder memory `(1, N + P, d)` and whether frames or prompt were cut.
    pub fn encode(&self, cx: &Ctx, input: &AssembledInput) -> Result<(Var, bool)> {
        let g = cx.g;
        let d = self.cfg.d_model;
        let n_all = input.frames.dim(0);
        let keep = even_subsample(n_all, self.cfg.max_frames);
        let mut truncated = keep.len() < n_all;
        let frames = if truncated {
            let per = input.frames.numel() / n_all;
            let mut data = Vec::with_capacity(keep.len() * per);
            for &i in &keep {
                data.extend_from_slice(&input.frames.data()[i * per..(i + 1) * per]);
            }
            let mut shape = input.frames.shape().to_vec();
            shape[0] = keep.len();
            Tensor::from_parts(shape, data)
        } else {
            input.frames.clone()
        };
        let n = keep.len();
        let mut vis = self.pixel_proj.forward(cx, g.constant(pool_frames(&frames, self.cfg.pool_grid)));
        if let (Some(proj), Some(feats)) = (&self.feat_proj, &input.features) {
            if feats.dim(1) != proj.d_in {
                return Err(Error::shape(format!("features dim {} != {}", feats.dim(1), proj.d_in)));
            }
            let rows: Vec<Tensor> = keep.iter().map(|&i| feats.slice_rows(i, 1)).collect();
            vis = g.add(vis, proj.forward(cx, g.constant(Tensor::cat_rows(&rows)?)));
        }
        let types = cx.p(self.type_embed);
        vis = g.add_row(vis, g.reshape(g.narrow(types, 0, 0, 1), &[d]));
        vis = g.add(vis, g.constant(nn::sinusoidal(&nn::positions(n), d)));

        let mut ids: &[u32] = &input.prompt_tokens;
        if ids.len() > self.cfg.max_prompt_tokens {
            ids = &ids[ids.len() - self.cfg.max_prompt_tokens..];
            truncated = true;
        }
        let mut parts = vec![vis];
        if !ids.is_empty() {
            let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
            let txt = g.gather_rows(cx.p(self.tok_embed), &idx);
            let txt = g.add_row(txt, g.reshape(g.narrow(types, 0, 1, 1), &[d]));
            parts.push(g.add(txt, g.constant(nn::sinusoidal(&nn::positions(idx.len()), d))));
        }
        let seq = g.concat(&parts, 0);
        let len = n + ids.len();
        let mut h = g.reshape(seq, &[1, len, d]);
        for layer in &self.encoder {
            h = layer.forward(cx, h, None);
        }
        Ok((self.enc_ln.forward(cx, h), truncated))
    }

    /// Hidden states `(S, d)` and logits `(S, V)` for decoder inputs
    /// `[BOS] ++ tokens[..S-1]`.
    pub fn decode(&self, cx: &Ctx, memory: Var, tokens: &[u32]) -> (Var, Var) {
        let g = cx.g;
        let d = self.cfg.d_model;
        let s = tokens.len();
        let mut inputs: Vec<usize> = Vec::with_capacity(s);
        inputs.push(BOS as usize);
        inputs.extend(tokens[..s - 1].iter().map(|&t| t as usize));
        let x = g.gather_rows(cx.p(self.tok_embed), &inputs);
        let x = g.add(x, g.constant(nn::sinusoidal(&nn::positions(s), d)));
        let mut h = g.reshape(x, &[1, s, d]);
        let mask = nn::causal_mask(s);
        for layer in &self.decoder {
            h = layer.forward(cx, h, memory, &mask);
        }
        let hidden = g.reshape(self.dec_ln.forward(cx, h), &[s, d]);
        let logits = self.head.forward(cx, hidden);
        (hidden, logits)
    }

    pub fn params(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids().filter(|id| TrainableSubset::All.selects(store.name(*id))).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the backbone. Teacher-forced mode scores `target` (which normally
/// ends with EOS); greedy mode generates until EOS or `max_len` and then
/// re-runs the decoder over the generated tokens on `cx` so that `c_t` is
/// differentiable.
pub fn reason(
    cx: &Ctx,
    backbone: &ReasonerBackbone,
    tokenizer: &Tokenizer,
    input: &AssembledInput,
    mode: DecodeMode,
) -> Result<ReasonerOutput> {
    let (tokens, mut truncated) = match mode {
        DecodeMode::TeacherForced { target } => {
            if target.is_empty() {
                return Err(Error::precondition("teacher-forced decoding needs a target"));
            }
            let max = backbone.cfg.max_target_tokens;
            (target[..target.len().min(max)].to_vec(), target.len() > max)
        }
        DecodeMode::Greedy { max_len } => {
            let g = Graph::inference();
            let icx = Ctx::new(&g, cx.store);
            let (memory, _) = backbone.encode(&icx, input)?;
            let max_len = max_len.min(backbone.cfg.max_target_tokens);
            let mut out: Vec<u32> = Vec::new();
            let mut hit_eos = false;
            while out.len() < max_len {
                let mut probe = out.clone();
                probe.push(PAD);
                let (_, logits) = backbone.decode(&icx, memory, &probe);
                let lv = g.value_ref(logits);
                let next = argmax(lv.row(probe.len() - 1)) as u32;
                drop(lv);
                if next == EOS {
                    hit_eos = true;
                    break;
                }
                out.push(next);
            }
            let cut = !hit_eos;
            (out, cut)
        }
    };
    let text = tokenizer.decode(&tokens);
    if tokens.is_empty() {
        let d = backbone.cfg.d_model;
        return Ok(ReasonerOutput {
            tokens,
            text,
            c_t: cx.g.constant(Tensor::zeros(vec![0, d])),
            logits: cx.g.constant(Tensor::zeros(vec![0, backbone.cfg.vocab_size])),
            truncated,
        });
    }
    let (memory, cut) = backbone.encode(cx, input)?;
    truncated |= cut;
    let (c_t, logits) = backbone.decode(cx, memory, &tokens);
    Ok(ReasonerOutput {
        tokens,
        text,
        c_t,
        logits,
        truncated,
    })
}

/// Target ids for an explanation: its tokens followed by EOS.
pub fn target_tokens(tokenizer: &Tokenizer, text: &str) -> Vec<u32> {
    let mut t = tokenizer.encode(text);
    t.push(EOS);
    t
}

/// Mean token negative log-likelihood over non-pad target positions.
pub fn ce_loss(g: &Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape(format!("logits {shape:?} vs {} targets", targets.len())));
    }
    let mask: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    if !mask.iter().any(|m| *m) {
        return Err(Error::precondition("target is all padding"));
    }
    if targets.iter().any(|&t| t as usize >= shape[1]) {
        return Err(Error::shape("target id outside vocabulary"));
    }
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(g.cross_entropy(logits, &ids, &mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;
    use crate::gradcheck::{central_diff, rel_error};
    use crate::math;
    use alloc::string::ToString;

    fn tiny() -> (ParamStore, ReasonerBackbone, Tokenizer, AssembledInput) {
        let tok = Tokenizer::train(["cut the onion then fry the onion"], 300);
        let mut cfg = ReasonerConfig::new(tok.vocab_size(), Some(4));
        cfg.d_model = 16;
        cfg.heads = 2;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        let mut store = ParamStore::new();
        let bb = ReasonerBackbone::new(&mut store, cfg, &mut Rng64::new(3));
        let events = (0..3)
            .map(|i| {
                Event::new(i, Some(Tensor::full(vec![2, 8, 8, 3], 0.1 * i as f64)), Some(Tensor::full(vec![2, 4], i as f64)), None)
                    .unwrap()
            })
            .collect();
        let s = Sample::new("v_m1", events, 1, Some("fry the onion".into()), None).unwrap();
        let caps = vec!["cut the onion".to_string(), "serve".to_string()];
        let input = assemble_input(&s, &caps, &HypothesisSet::new("v_m1"), &tok, &AssembleOptions::default()).unwrap();
        (store, bb, tok, input)
    }

    #[test]
    fn assembled_input_layout() {
        let (_, _, _, input) = tiny();
        assert_eq!(input.frames.dim(0), 6);
        assert_eq!(input.frame_events, vec![0, 0, 1, 1, 2, 2]);
        let f = input.features.as_ref().unwrap();
        assert_eq!(f.row(2), &[0.0; 4]);
        assert_eq!(f.row(4), &[2.0; 4]);
    }

    #[test]
    fn teacher_forced_shapes() {
        let (store, bb, tok, input) = tiny();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let target = target_tokens(&tok, "fry the onion");
        let out = reason(&cx, &bb, &tok, &input, DecodeMode::TeacherForced { target: &target }).unwrap();
        assert_eq!(g.shape(out.logits), vec![target.len(), tok.vocab_size()]);
        assert_eq!(g.shape(out.c_t), vec![target.len(), 16]);
        assert_eq!(out.text, "fry the onion");
    }

    #[test]
    fn greedy_is_deterministic() {
        let (store, bb, tok, input) = tiny();
        let run = || {
            let g = Graph::new();
            let cx = Ctx::new(&g, &store);
            let o = reason(&cx, &bb, &tok, &input, DecodeMode::Greedy { max_len: 6 }).unwrap();
            assert_eq!(g.shape(o.c_t)[0], o.tokens.len());
            o.tokens
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ce_uniform_and_all_pad() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![3, 100]));
        let l = ce_loss(&g, logits, &[5, 9, PAD]).unwrap();
        assert!((g.item(l) - math::ln(100.0)).abs() < 1e-12);
        assert!(ce_loss(&g, logits, &[PAD, PAD, PAD]).is_err());

        let mut big = vec![0.0; 2 * 10];
        big[3] = 50.0;
        big[10 + 7] = 50.0;
        let l = ce_loss(&g, g.constant(Tensor::new(vec![2, 10], big).unwrap()), &[3, 7]).unwrap();
        assert!(g.item(l) < 1e-15);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = Rng64::new(2);
        let x = rng.normals(4 * 6);
        let targets = [1u32, 5, PAD, 3];
        let g = Graph::new();
        let v = g.leaf(Tensor::new(vec![4, 6], x.clone()).unwrap());
        let grads = g.backward(ce_loss(&g, v, &targets).unwrap());
        let fd = central_diff(&x, 1e-6, |p| {
            let g = Graph::new();
            let v = g.constant(Tensor::new(vec![4, 6], p.to_vec()).unwrap());
            g.item(ce_loss(&g, v, &targets).unwrap())
        });
        assert!(rel_error(grads.wrt(v).unwrap().data(), &fd) < 1e-6);
    }

    #[test]
    fn subset_selects_by_relative_prefix() {
        let s = TrainableSubset::Prefixes(vec!["dec".into(), "head".into()]);
        assert!(s.selects("reasoner.dec0.ffn.fc1.weight"));
        assert!(s.selects("reasoner.head.bias"));
        assert!(!s.selects("reasoner.enc0.ln1.gamma"));
        assert!(!s.selects("bridge.fc1.weight"));
        assert!(TrainableSubset::All.selects("reasoner.tok_embed"));
    }
}
