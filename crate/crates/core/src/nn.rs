//! Layers built on the autodiff graph.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Ctx, Var};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(self, cx: &Ctx, x: Var) -> Var {
        match self {
            Activation::Gelu => cx.g.gelu(x),
            Activation::Silu => cx.g.silu(x),
        }
    }
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng64) -> Self {
        let w = store.add_xavier(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.bias"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    /// Zero weight and bias, so the layer initially outputs zeros.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add_zeros(format!("{name}.weight"), &[d_in, d_out]);
        let b = bias.then(|| store.add_zeros(format!("{name}.bias"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let y = cx.g.matmul(x, cx.p(self.w));
        match self.b {
            Some(b) => cx.g.add_row(y, cx.p(b)),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

/// Two linear layers with an activation between them.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
        rng: &mut Rng64,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, rng),
            act,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let h = self.act.apply(cx, self.fc1.forward(cx, x));
        self.fc2.forward(cx, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let g = cx.g;
        let n = g.layer_norm(x, LN_EPS);
        g.add_row(g.mul_row(n, cx.p(self.gamma)), cx.p(self.beta))
    }
}

/// Scaled dot-product attention over `(batch, s, d)` inputs split into
/// `heads`. `mask`, when given, is an additive `(sq, sk)` tensor.
pub fn attention(cx: &Ctx, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Tensor>) -> Var {
    let g = cx.g;
    let qs = g.shape(q);
    let ks = g.shape(k);
    let (b, sq, d) = (qs[0], qs[1], qs[2]);
    let sk = ks[1];
    let dh = d / heads;
    let split = |x: Var, s: usize| {
        if heads == 1 {
            return x;
        }
        let x = g.reshape(x, &[b, s, heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * heads, s, dh])
    };
    let (qh, kh, vh) = (split(q, sq), split(k, sk), split(v, sk));
    let scores = g.scale(g.bmm(qh, g.transpose(kh)), 1.0 / math::sqrt(dh as f64));
    let scores = match mask {
        Some(m) => g.add_broadcast(scores, g.constant(m.clone())),
        None => scores,
    };
    let probs = g.softmax(scores);
    let out = g.bmm(probs, vh);
    if heads == 1 {
        return out;
    }
    let out = g.reshape(out, &[b, heads, sq, dh]);
    let out = g.permute(out, &[0, 2, 1, 3]);
    g.reshape(out, &[b, sq, d])
}

/// Additive causal mask: position `i` may attend to `j <= i`.
pub fn causal_mask(s: usize) -> Tensor {
    let mut data = vec![0.0; s * s];
    for i in 0..s {
        for j in i + 1..s {
            data[i * s + j] = -1e9;
        }
    }
    Tensor::from_parts(vec![s, s], data)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_kv: usize, heads: usize, rng: &mut Rng64) -> Self {
        assert_eq!(d_model % heads, 0, "d_model {d_model} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d_model, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d_model, false, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            heads,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var, kv: Var, mask: Option<&Tensor>) -> Var {
        let q = self.q.forward(cx, x);
        let k = self.k.forward(cx, kv);
        let v = self.v.forward(cx, kv);
        let a = attention(cx, q, k, v, self.heads, mask);
        self.o.forward(cx, a)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp2,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, ffn_mult: usize, rng: &mut Rng64) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, d_model, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            ffn: Mlp2::new(store, &format!("{name}.ffn"), d_model, d_model * ffn_mult, d_model, Activation::Gelu, rng),
        }
    }

    /// `x`: `(batch, s, d)`.
    pub fn forward(&self, cx: &Ctx, x: Var, mask: Option<&Tensor>) -> Var {
        let g = cx.g;
        let h = self.ln1.forward(cx, x);
        let x = g.add(x, self.attn.forward(cx, h, h, mask));
        let h = self.ln2.forward(cx, x);
        g.add(x, self.ffn.forward(cx, h))
    }
}

/// Pre-norm transformer decoder layer with causal self-attention and
/// cross-attention into an encoder memory.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: Mlp2,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, ffn_mult: usize, rng: &mut Rng64) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d_model, d_model, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d_model, d_model, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d_model),
            ffn: Mlp2::new(store, &format!("{name}.ffn"), d_model, d_model * ffn_mult, d_model, Activation::Gelu, rng),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var, memory: Var, causal: &Tensor) -> Var {
        let g = cx.g;
        let h = self.ln1.forward(cx, x);
        let x = g.add(x, self.self_attn.forward(cx, h, h, Some(causal)));
        let h = self.ln2.forward(cx, x);
        let x = g.add(x, self.cross_attn.forward(cx, h, memory, None));
        let h = self.ln3.forward(cx, x);
        g.add(x, self.ffn.forward(cx, h))
    }
}

/// Sinusoidal embeddings for positions `0..n` (or arbitrary scalar positions).
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = math::exp(-math::ln(10_000.0) * i as f64 / half.max(1) as f64);
            data[r * dim + i] = math::sin(p * freq);
            data[r * dim + half + i] = math::cos(p * freq);
        }
    }
    Tensor::from_parts(vec![positions.len(), dim], data)
}

pub fn positions(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}
