//! Local-global hybrid visual condition and the fixed condition embedder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HybridVisualCondition {
    /// `(m, D)` embeddings of the highest-weighted frames, in frame order.
    pub c_local: Tensor,
    /// `(1, D)` weighted average of all frame embeddings.
    pub c_global: Tensor,
    /// `(N)` softmax weights.
    pub gamma: Vec<f64>,
    /// Frame indices forming `c_local`.
    pub selected: Vec<usize>,
}

impl HybridVisualCondition {
    /// `[c_local; c_global]`, shape `(m + 1, D)`.
    pub fn c_v(&self) -> Tensor {
        Tensor::cat_rows(&[self.c_local.clone(), self.c_global.clone()]).expect("same width")
    }
}

/// Softmax over frames of the cosine similarity between each frame
/// embedding and the text embedding.
pub fn frame_relevance_weights(frame_embeds: &Tensor, text_embed: &[f64]) -> Result<Vec<f64>> {
    if frame_embeds.rank() != 2 || frame_embeds.dim(0) == 0 {
        return Err(Error::shape(format!("frame embeddings must be (N>=1, D), got {:?}", frame_embeds.shape())));
    }
    if frame_embeds.dim(1) != text_embed.len() {
        return Err(Error::shape("frame and text embedding widths differ"));
    }
    let tn = math::norm(text_embed);
    if tn == 0.0 {
        return Err(Error::domain("text embedding has zero norm"));
    }
    let mut sims = Vec::with_capacity(frame_embeds.dim(0));
    for i in 0..frame_embeds.dim(0) {
        let row = frame_embeds.row(i);
        let n = math::norm(row);
        if n == 0.0 {
            return Err(Error::domain(format!("frame embedding {i} has zero norm")));
        }
        sims.push(math::dot(row, text_embed) / (n * tn));
    }
    let lse = math::logsumexp(&sims);
    Ok(sims.iter().map(|s| math::exp(s - lse)).collect())
}

pub fn hybrid_condition(frame_embeds: &Tensor, gamma: &[f64], m: usize) -> Result<HybridVisualCondition> {
    let n = frame_embeds.dim(0);
    if gamma.len() != n {
        return Err(Error::shape("one weight per frame required"));
    }
    if m == 0 || m > n {
        return Err(Error::precondition(format!("need 1 <= m <= N, got m={m}, N={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| gamma[b].partial_cmp(&gamma[a]).unwrap_or(core::cmp::Ordering::Equal));
    let mut selected = order[..m].to_vec();
    selected.sort_unstable();
    let d = frame_embeds.dim(1);
    let mut global = vec![0.0; d];
    for (i, g) in gamma.iter().enumerate() {
        for (o, v) in global.iter_mut().zip(frame_embeds.row(i)) {
            *o += g * v;
        }
    }
    let local: Vec<Tensor> = selected.iter().map(|&i| frame_embeds.slice_rows(i, 1)).collect();
    Ok(HybridVisualCondition {
        c_local: Tensor::cat_rows(&local)?,
        c_global: Tensor::new(vec![1, d], global)?,
        gamma: gamma.to_vec(),
        selected,
    })
}

/// Fixed random projections of image and text features into a shared
/// condition space. When both inputs have the same width one matrix serves
/// both, so features that already live in a joint space stay comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedder {
    pub image: Tensor,
    pub text: Tensor,
}

fn projection(rng: &mut Rng64, d_in: usize, d_out: usize) -> Tensor {
    let s = 1.0 / math::sqrt(d_in as f64);
    Tensor::from_parts(vec![d_in, d_out], rng.normals(d_in * d_out).into_iter().map(|v| v * s).collect())
}

fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let d_out = w.dim(1);
    let mut out = vec![0.0; d_out];
    for (i, xi) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    out
}

impl ConditionEmbedder {
    pub fn new(d_img: usize, d_txt: usize, d_cond: usize, seed: u64) -> Self {
        let mut rng = Rng64::stream(seed, 0xE3B);
        let image = projection(&mut rng, d_img, d_cond);
        let text = if d_txt == d_img { image.clone() } else { projection(&mut rng, d_txt, d_cond) };
        Self { image, text }
    }

    pub fn d_cond(&self) -> usize {
        self.image.dim(1)
    }

    pub fn embed_frames(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.dim(1) != self.image.dim(0) {
            return Err(Error::shape(format!("frame features {:?} vs embedder input {}", features.shape(), self.image.dim(0))));
        }
        let mut data = Vec::with_capacity(features.dim(0) * self.d_cond());
        for r in 0..features.dim(0) {
            data.extend(project(features.row(r), &self.image));
        }
        Tensor::new(vec![features.dim(0), self.d_cond()], data)
    }

    pub fn embed_text(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.text.dim(0) {
            return Err(Error::shape("text feature width mismatch"));
        }
        Ok(project(features, &self.text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_give_uniform_weights() {
        let f = Tensor::new(vec![4, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let g = frame_relevance_weights(&f, &[0.3, -1.0]).unwrap();
        assert!(g.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_frame_softmax() {
        let f = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 5.0]).unwrap();
        let g = frame_relevance_weights(&f, &[2.0, 0.0]).unwrap();
        let e = math::exp(1.0);
        assert!((g[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!(frame_relevance_weights(&f, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn hybrid_selection_and_global() {
        let f = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let h = hybrid_condition(&f, &[0.2, 0.5, 0.3], 2).unwrap();
        assert_eq!(h.selected, vec![1, 2]);
        assert_eq!(h.c_local.data(), &[2.0, 3.0]);
        assert!((h.c_global.data()[0] - (0.2 + 1.0 + 0.9)).abs() < 1e-12);
        assert_eq!(h.c_v().shape(), &[3, 1]);
        let all = hybrid_condition(&f, &[1.0 / 3.0; 3], 3).unwrap();
        assert_eq!(all.selected, vec![0, 1, 2]);
        assert!((all.c_global.data()[0] - 2.0).abs() < 1e-12);
        assert!(hybrid_condition(&f, &[0.2, 0.5, 0.3], 4).is_err());
    }
}
