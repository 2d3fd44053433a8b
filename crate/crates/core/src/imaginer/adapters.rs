//! Visual cross-attention, temporal convolution and FFN adapters.

use alloc::format;

use crate::autograd::{Ctx, Var};
use crate::math;
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;

/// `softmax(q kᵀ / sqrt(d)) v` for `q (n, d)` against keys shared by all
/// queries, `k, v (s, d)`.
pub fn attend(cx: &Ctx, q: Var, k: Var, v: Var) -> Var {
    let g = cx.g;
    let d = *g.shape(q).last().unwrap();
    let scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / math::sqrt(d as f64));
    g.matmul(g.softmax(scores), v)
}

/// Frozen text cross-attention projections `W^q`, `W_t^k`, `W_t^v`, `W^o`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, d_text: usize, rng: &mut Rng64) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), channels, channels, false, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d_text, channels, false, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d_text, channels, false, rng),
            wo: Linear::new(store, &format!("{name}.wo"), channels, channels, true, rng),
        }
    }
}

/// Key/value projections `W_v^k`, `W_v^v` of the visual branch; `W_v^v`
/// starts at zero.
#[derive(Debug, Clone)]
pub struct VAdapter {
    pub wk: Linear,
    pub wv: Linear,
}

impl VAdapter {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, d_visual: usize, rng: &mut Rng64) -> Self {
        Self {
            wk: Linear::new(store, &format!("{name}.wk"), d_visual, channels, false, rng),
            wv: Linear::zeros(store, &format!("{name}.wv"), d_visual, channels, false),
        }
    }

    /// Attention of already-projected queries over the visual condition.
    pub fn attend(&self, cx: &Ctx, q: Var, c_v: Var) -> Var {
        attend(cx, q, self.wk.forward(cx, c_v), self.wv.forward(cx, c_v))
    }
}

/// `softmax((x W^q)(c_v W_v^k)ᵀ / sqrt(d_k)) (c_v W_v^v)` for `x (n, C)`.
pub fn v_adapter(cx: &Ctx, x: Var, c_v: Var, wq: &Linear, adapter: &VAdapter) -> Var {
    adapter.attend(cx, wq.forward(cx, x), c_v)
}

/// Text cross-attention plus the visual branch (when present), both fed by
/// the shared query projection. The output projection is not applied.
pub fn dual_cross_attention(
    cx: &Ctx,
    x: Var,
    c_t: Var,
    c_v: Var,
    base: &CrossAttention,
    adapter: Option<&VAdapter>,
) -> Var {
    let q = base.wq.forward(cx, x);
    let text = attend(cx, q, base.wk.forward(cx, c_t), base.wv.forward(cx, c_t));
    match adapter {
        Some(a) => cx.g.add(text, a.attend(cx, q, c_v)),
        None => text,
    }
}

/// Temporal bottleneck: `(3,1,1)` convolutions `C -> C/r -> C`, replicate
/// padding in time, zero-initialised up-projection.
#[derive(Debug, Clone)]
pub struct TAdapter {
    pub down: ParamId,
    pub up: ParamId,
}

pub const TEMPORAL_KERNEL: usize = 3;

impl TAdapter {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut Rng64) -> Self {
        let r = (channels / reduction).max(1);
        let k = TEMPORAL_KERNEL;
        Self {
            down: store.add_xavier(format!("{name}.down"), &[r, channels, k, 1, 1], channels * k, r * k, rng),
            up: store.add_zeros(format!("{name}.up"), &[channels, r, k, 1, 1]),
        }
    }

    pub fn branch(&self, cx: &Ctx, x: Var) -> Var {
        let g = cx.g;
        g.conv3d(g.conv3d(x, cx.p(self.down)), cx.p(self.up))
    }

    /// `x + up(down(x))` for `x (frames, C, H, W)`.
    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        cx.g.add(x, self.branch(cx, x))
    }
}

/// `x + FC_up(GELU(FC_down(x)))` with `FC_up` zero-initialised.
#[derive(Debug, Clone)]
pub struct FAdapter {
    pub down: Linear,
    pub up: Linear,
}

impl FAdapter {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut Rng64) -> Self {
        let r = (channels / reduction).max(1);
        Self {
            down: Linear::new(store, &format!("{name}.down"), channels, r, true, rng),
            up: Linear::zeros(store, &format!("{name}.up"), r, channels, true),
        }
    }

    pub fn branch(&self, cx: &Ctx, x: Var) -> Var {
        self.up.forward(cx, cx.g.gelu(self.down.forward(cx, x)))
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        cx.g.add(x, self.branch(cx, x))
    }
}

/// Standalone T-Adapter on a tensor, for callers outside a graph.
pub fn t_adapter(store: &ParamStore, adapter: &TAdapter, x: &Tensor) -> Tensor {
    let g = crate::autograd::Graph::inference();
    let cx = Ctx::new(&g, store);
    let out = adapter.forward(&cx, g.constant(x.clone()));
    g.value(out)
}

/// Standalone F-Adapter on a tensor.
pub fn f_adapter(store: &ParamStore, adapter: &FAdapter, x: &Tensor) -> Tensor {
    let g = crate::autograd::Graph::inference();
    let cx = Ctx::new(&g, store);
    let out = adapter.forward(&cx, g.constant(x.clone()));
    g.value(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use alloc::vec;

    fn randomize(store: &mut ParamStore, id: ParamId, rng: &mut Rng64) {
        let v = store.value_mut(id);
        let n = v.numel();
        v.data_mut().copy_from_slice(&rng.normals(n));
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut rng = Rng64::new(1);
        let mut store = ParamStore::new();
        let wq = Linear::new(&mut store, "wq", 4, 4, false, &mut rng);
        let ad = VAdapter::new(&mut store, "va", 4, 3, &mut rng);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let out = v_adapter(&cx, g.constant(Tensor::new(vec![5, 4], rng.normals(20)).unwrap()), g.constant(Tensor::new(vec![2, 3], rng.normals(6)).unwrap()), &wq, &ad);
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_token_broadcasts_value() {
        let mut rng = Rng64::new(2);
        let mut store = ParamStore::new();
        let wq = Linear::new(&mut store, "wq", 4, 4, false, &mut rng);
        let ad = VAdapter::new(&mut store, "va", 4, 3, &mut rng);
        randomize(&mut store, ad.wv.w, &mut rng);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let cv = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = g.value(v_adapter(&cx, g.constant(Tensor::new(vec![3, 4], rng.normals(12)).unwrap()), g.constant(cv.clone()), &wq, &ad));
        let w = store.value(ad.wv.w);
        for r in 0..3 {
            for c in 0..4 {
                let want: f64 = (0..3).map(|i| cv.data()[i] * w.data()[i * 4 + c]).sum();
                assert!((out.row(r)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_up_projections_are_identity() {
        let mut rng = Rng64::new(3);
        let mut store = ParamStore::new();
        let ta = TAdapter::new(&mut store, "ta", 8, 4, &mut rng);
        let fa = FAdapter::new(&mut store, "fa", 8, 4, &mut rng);
        let x = Tensor::new(vec![2, 8, 3, 3], rng.normals(144)).unwrap();
        assert_eq!(t_adapter(&store, &ta, &x), x);
        let y = Tensor::new(vec![5, 8], rng.normals(40)).unwrap();
        assert_eq!(f_adapter(&store, &fa, &y), y);
        let zero = Tensor::zeros(vec![2, 8]);
        assert_eq!(f_adapter(&store, &fa, &zero), zero);
    }
}
