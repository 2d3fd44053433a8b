//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with its output value. [`Graph::backward`] then walks the tape in reverse
//! and accumulates gradients for every node that depends on a trainable leaf.
//! Shape errors inside the graph are programming errors and panic; public
//! model entry points validate their inputs before building graphs.

mod kernels;

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use crate::math;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

pub use kernels::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `x` viewed as `(outer, mid, inner)`, `b` of length `mid`.
    AddBcast { x: Var, b: Var, mid: usize, inner: usize },
    MulBcast { x: Var, b: Var, mid: usize, inner: usize },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Gelu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, dim: usize, start: usize },
    Concat { xs: Vec<Var>, dim: usize },
    Softmax(Var),
    LogSoftmax(Var),
    /// Row normalisation without affine terms (layer norm, and group norm via a
    /// reshaped view).
    Normalize { x: Var, width: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Conv3d { x: Var, w: Var },
    Upsample2x(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Methods take `&self`, so calls nest freely.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<ParamId, Var>>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// A graph paired with the parameter store its modules read from.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore) -> Self {
        Self { g, store }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            track_params: true,
        }
    }

    /// A graph whose parameters never require gradients (evaluation mode).
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[x.0].value), nodes[x.0].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            (f(&na.value, &nb.value), na.requires_grad || nb.requires_grad)
        };
        self.push(value, op, rg)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used for input-gradient checks).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf, created once per graph and reused afterwards.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let rg = self.track_params && store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, rg);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&self, x: Var) -> Var {
        let t = self.value(x);
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x.add(y).expect("add"))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x.sub(y).expect("sub"))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x.zip(y, |p, q| p * q).expect("mul"))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x.zip(y, |p, q| p / q).expect("div"))
    }

    fn bcast(&self, x: Var, b: Var, mid: usize, inner: usize, mul: bool) -> Var {
        let op = if mul {
            Op::MulBcast { x, b, mid, inner }
        } else {
            Op::AddBcast { x, b, mid, inner }
        };
        self.binary(x, b, op, |xv, bv| {
            assert_eq!(bv.numel(), mid, "broadcast operand length");
            assert_eq!(xv.numel() % (mid * inner), 0, "broadcast shape {:?}", xv.shape());
            let mut out = xv.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let c = (i / inner) % mid;
                if mul {
                    *v *= bv.data()[c];
                } else {
                    *v += bv.data()[c];
                }
            }
            out
        })
    }

    /// `x[..., j] + b[j]`.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        self.bcast(x, b, n, 1, false)
    }

    /// `x[..., j] * b[j]`.
    pub fn mul_row(&self, x: Var, b: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        self.bcast(x, b, n, 1, true)
    }

    /// Adds `b` repeated over the leading axes of `x`; `b` must match the
    /// trailing block of `x` in element count (e.g. an attention mask).
    pub fn add_broadcast(&self, x: Var, b: Var) -> Var {
        let n = self.value_ref(b).numel();
        self.bcast(x, b, n, 1, false)
    }

    /// Per-channel add for `x` shaped `(batch, channels, spatial...)`.
    pub fn add_channel(&self, x: Var, b: Var) -> Var {
        let s = self.shape(x);
        let inner = s[2..].iter().product();
        self.bcast(x, b, s[1], inner, false)
    }

    pub fn mul_channel(&self, x: Var, b: Var) -> Var {
        let s = self.shape(x);
        let inner = s[2..].iter().product();
        self.bcast(x, b, s[1], inner, true)
    }

    /// `x * s` for a single-element node `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Var {
        self.bcast(x, s, 1, 1, true)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |t| t.scale(s))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |t| t.map(|v| v + s))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |t| t.map(math::exp))
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |t| t.map(math::ln))
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |t| t.map(math::sqrt))
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |t| t.map(math::gelu))
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |t| t.map(math::silu))
    }

    pub fn square(&self, x: Var) -> Var {
        self.mul(x, x)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        self.unary(x, Op::Sum(x), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(&self, x: Var) -> Var {
        self.unary(x, Op::Mean(x), |t| Tensor::scalar(t.mean()))
    }

    /// Sum over the last axis; `(.., n) -> (..)` (rank-1 input gives shape `[1]`).
    pub fn sum_last(&self, x: Var) -> Var {
        self.unary(x, Op::SumLast(x), |t| {
            let mut shape = t.shape().to_vec();
            shape.pop();
            if shape.is_empty() {
                shape.push(1);
            }
            let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
            Tensor::from_parts(shape, data)
        })
    }

    /// Mean over axis 0 of a `(n, d)` tensor.
    pub fn mean_rows(&self, x: Var) -> Var {
        self.unary(x, Op::MeanRows(x), |t| {
            assert_eq!(t.rank(), 2, "mean_rows expects rank 2");
            let (n, d) = (t.dim(0), t.dim(1));
            let mut out = vec![0.0; d];
            for r in 0..n {
                for (o, v) in out.iter_mut().zip(t.row(r)) {
                    *o += v / n as f64;
                }
            }
            Tensor::from_parts(vec![d], out)
        })
    }

    /// Cosine similarity of two equally shaped tensors, as a `[1]` node.
    pub fn cosine(&self, a: Var, b: Var) -> Var {
        let dot = self.sum(self.mul(a, b));
        let na = self.sqrt(self.sum(self.square(a)));
        let nb = self.sqrt(self.sum(self.square(b)));
        self.div(dot, self.mul(na, nb))
    }

    /// Cosine of every row of `a (n, d)` with the vector `b (d)`; shape `(n)`.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Var {
        let s = self.shape(a);
        let (n, d) = (s[0], s[1]);
        let dots = self.reshape(self.matmul(a, self.reshape(b, &[d, 1])), &[n]);
        let na = self.sqrt(self.sum_last(self.square(a)));
        let nb = self.sqrt(self.sum(self.square(b)));
        self.div(dots, self.mul_scalar(na, nb))
    }

    /// Rows of `x (n, d)` scaled to unit L2 norm.
    pub fn normalize_rows(&self, x: Var) -> Var {
        let s = self.shape(x);
        let (n, d) = (s[0], s[1]);
        let norms = self.sqrt(self.sum_last(self.square(x)));
        let inv = self.div(self.constant(Tensor::full(vec![n], 1.0)), norms);
        self.reshape(self.mul_channel(self.reshape(x, &[1, n, d]), inv), &[n, d])
    }

    // ---- linear algebra & layout -------------------------------------------

    /// `a (.., m, k) · b (k, n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a, b), |av, bv| {
            assert_eq!(bv.rank(), 2, "matmul rhs must be rank 2");
            let k = av.last_dim();
            assert_eq!(k, bv.dim(0), "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
            let n = bv.dim(1);
            let m = av.numel() / k;
            let mut out = vec![0.0; m * n];
            gemm(m, n, k, av.data(), false, bv.data(), false, &mut out);
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, out)
        })
    }

    /// Batched `a (b, m, k) · b (b, k, n)`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Bmm(a, b), |av, bv| {
            let (bs, m, k) = (av.dim(0), av.dim(1), av.dim(2));
            assert_eq!(bv.dim(0), bs, "bmm batch");
            assert_eq!(bv.dim(1), k, "bmm inner dims {:?} x {:?}", av.shape(), bv.shape());
            let n = bv.dim(2);
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    m,
                    n,
                    k,
                    &av.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::from_parts(vec![bs, m, n], out)
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        self.unary(x, Op::Reshape(x), move |t| {
            t.clone().reshape(shape.clone()).expect("reshape")
        })
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let p = perm.to_vec();
        self.unary(x, Op::Permute(x, p.clone()), move |t| {
            assert_eq!(p.len(), t.rank(), "permute rank");
            let shape: Vec<usize> = p.iter().map(|&i| t.dim(i)).collect();
            let mut out = vec![0.0; t.numel()];
            kernels::permute(t.data(), t.shape(), &p, &mut out);
            Tensor::from_parts(shape, out)
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Var {
        let r = self.shape(x).len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn narrow(&self, x: Var, dim: usize, start: usize, len: usize) -> Var {
        self.unary(x, Op::Narrow { x, dim, start }, |t| {
            let s = t.shape();
            assert!(start + len <= s[dim], "narrow {start}+{len} beyond {:?}", s);
            let outer: usize = s[..dim].iter().product();
            let inner: usize = s[dim + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * s[dim] + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[dim] = len;
            Tensor::from_parts(shape, data)
        })
    }

    pub fn concat(&self, xs: &[Var], dim: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs[0].0].value.shape().to_vec();
            let outer: usize = first[..dim].iter().product();
            let inner: usize = first[dim + 1..].iter().product();
            let mut total = 0;
            for v in xs {
                let s = nodes[v.0].value.shape();
                assert_eq!(s.len(), first.len(), "concat rank");
                for (ax, (a, b)) in s.iter().zip(&first).enumerate() {
                    assert!(ax == dim || a == b, "concat shapes {:?} vs {:?}", s, first);
                }
                total += s[dim];
            }
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let d = t.dim(dim);
                    data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
                }
            }
            let mut shape = first;
            shape[dim] = total;
            (
                Tensor::from_parts(shape, data),
                xs.iter().any(|v| nodes[v.0].requires_grad),
            )
        };
        self.push(value, Op::Concat { xs: xs.to_vec(), dim }, rg)
    }

    /// Rows of a rank-2 `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let ids = ids.to_vec();
        self.unary(table, Op::GatherRows { table, ids: ids.clone() }, move |t| {
            let d = t.dim(1);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in &ids {
                assert!(i < t.dim(0), "row {i} out of range {}", t.dim(0));
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts(vec![ids.len(), d], data)
        })
    }

    // ---- normalisation & activations over rows -----------------------------

    pub fn softmax(&self, x: Var) -> Var {
        self.unary(x, Op::Softmax(x), |t| {
            let mut out = t.clone();
            let n = t.last_dim();
            for row in out.data_mut().chunks_mut(n) {
                let lse = math::logsumexp(row);
                for v in row.iter_mut() {
                    *v = math::exp(*v - lse);
                }
            }
            out
        })
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        self.unary(x, Op::LogSoftmax(x), |t| {
            let mut out = t.clone();
            let n = t.last_dim();
            for row in out.data_mut().chunks_mut(n) {
                let lse = math::logsumexp(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        })
    }

    fn normalize(&self, x: Var, width: usize, eps: f64) -> Var {
        let (value, xhat, rstd, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            assert_eq!(t.numel() % width, 0, "normalize width");
            let mut xhat = vec![0.0; t.numel()];
            let mut rstd = vec![0.0; t.numel() / width];
            kernels::normalize_rows(t.data(), width, eps, &mut xhat, &mut rstd);
            (
                Tensor::from_parts(t.shape().to_vec(), xhat.clone()),
                xhat,
                rstd,
                nodes[x.0].requires_grad,
            )
        };
        self.push(value, Op::Normalize { x, width, xhat, rstd }, rg)
    }

    /// Layer norm over the last axis (no affine terms).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let n = *self.shape(x).last().unwrap();
        self.normalize(x, n, eps)
    }

    /// Group norm for `(batch, channels, spatial..)` (no affine terms).
    pub fn group_norm(&self, x: Var, groups: usize, eps: f64) -> Var {
        let s = self.shape(x);
        assert_eq!(s[1] % groups, 0, "channels {} not divisible by groups {groups}", s[1]);
        let width = s[1] / groups * s[2..].iter().product::<usize>();
        self.normalize(x, width, eps)
    }

    // ---- convolutions ------------------------------------------------------

    /// `x (b, cin, h, w)` * `w (cout, cin, kh, kw)` with zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        self.binary(x, w, Op::Conv2d { x, w, stride, pad }, |xv, wv| {
            assert_eq!(xv.rank(), 4, "conv2d input rank");
            assert_eq!(wv.rank(), 4, "conv2d weight rank");
            assert_eq!(xv.dim(1), wv.dim(1), "conv2d channels {:?} {:?}", xv.shape(), wv.shape());
            let geom = kernels::Conv2dGeom::new(xv.shape(), wv.shape(), stride, pad);
            let mut out = vec![0.0; geom.batch * geom.cout * geom.oh * geom.ow];
            geom.forward(xv.data(), wv.data(), &mut out);
            Tensor::from_parts(vec![geom.batch, geom.cout, geom.oh, geom.ow], out)
        })
    }

    /// `x (frames, cin, h, w)` * `w (cout, cin, kt, kh, kw)`; replicate padding
    /// in time, zero padding in space, output keeps the input extent.
    pub fn conv3d(&self, x: Var, w: Var) -> Var {
        self.binary(x, w, Op::Conv3d { x, w }, |xv, wv| {
            assert_eq!(xv.rank(), 4, "conv3d input rank");
            assert_eq!(wv.rank(), 5, "conv3d weight rank");
            assert_eq!(xv.dim(1), wv.dim(1), "conv3d channels");
            let geom = kernels::Conv3dGeom::new(xv.shape(), wv.shape());
            let mut out = vec![0.0; geom.frames * geom.cout * geom.h * geom.w];
            geom.forward(xv.data(), wv.data(), &mut out);
            Tensor::from_parts(vec![geom.frames, geom.cout, geom.h, geom.w], out)
        })
    }

    /// Nearest-neighbour 2× upsampling of `(b, c, h, w)`.
    pub fn upsample2x(&self, x: Var) -> Var {
        self.unary(x, Op::Upsample2x(x), |t| {
            let (b, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
            let mut out = vec![0.0; b * c * 4 * h * w];
            for bc in 0..b * c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        out[(bc * 2 * h + y) * 2 * w + x] = t.data()[(bc * h + y / 2) * w + x / 2];
                    }
                }
            }
            Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out)
        })
    }

    // ---- losses ------------------------------------------------------------

    /// Mean token negative log-likelihood of `targets` under row-wise softmax of
    /// `logits (s, v)`, over positions where `mask` is true. Caller guarantees at
    /// least one unmasked position.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
        let (value, probs, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            let v = t.last_dim();
            assert_eq!(t.rows(), targets.len(), "cross_entropy rows");
            let count = mask.iter().filter(|m| **m).count();
            assert!(count > 0, "cross_entropy with no active positions");
            let mut probs = vec![0.0; t.numel()];
            let mut loss = 0.0;
            for r in 0..t.rows() {
                let row = t.row(r);
                let lse = math::logsumexp(row);
                for j in 0..v {
                    probs[r * v + j] = math::exp(row[j] - lse);
                }
                if mask[r] {
                    loss += lse - row[targets[r]];
                }
            }
            (
                Tensor::scalar(loss / count as f64),
                probs,
                nodes[logits.0].requires_grad,
            )
        };
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            backprop(&nodes, i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients {
            grads,
            params: self.params.borrow().iter().map(|(k, v)| (*k, *v)).collect(),
        }
    }
}

fn accum(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Allocates a zero gradient buffer for `v`, lets `f` fill it and accumulates
/// it, skipping the work when `v` does not need a gradient.
fn accum_with(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let mut buf = vec![0.0; nodes[v.0].value.numel()];
    f(&mut buf);
    let t = Tensor::from_parts(nodes[v.0].value.shape().to_vec(), buf);
    accum(nodes, grads, v, t);
}

fn backprop(nodes: &[Node], i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[i];
    let out = &node.value;
    let go = gout.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(nodes, grads, *a, gout.clone());
            accum(nodes, grads, *b, gout.clone());
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, gout.clone());
            accum(nodes, grads, *b, gout.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accum(nodes, grads, *a, gout.zip(bv, |g, y| g * y).unwrap());
            accum(nodes, grads, *b, gout.zip(av, |g, x| g * x).unwrap());
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accum(nodes, grads, *a, gout.zip(bv, |g, y| g / y).unwrap());
            accum_with(nodes, grads, *b, |buf| {
                for j in 0..buf.len() {
                    let y = bv.data()[j];
                    buf[j] = -go[j] * av.data()[j] / (y * y);
                }
            });
        }
        Op::AddBcast { x, b, mid, inner } => {
            accum(nodes, grads, *x, gout.clone());
            accum_with(nodes, grads, *b, |buf| {
                for (j, g) in go.iter().enumerate() {
                    buf[(j / inner) % mid] += g;
                }
            });
        }
        Op::MulBcast { x, b, mid, inner } => {
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            accum_with(nodes, grads, *x, |buf| {
                for (j, g) in go.iter().enumerate() {
                    buf[j] = g * bv.data()[(j / inner) % mid];
                }
            });
            accum_with(nodes, grads, *b, |buf| {
                for (j, g) in go.iter().enumerate() {
                    buf[(j / inner) % mid] += g * xv.data()[j];
                }
            });
        }
        Op::Scale(x, s) => accum(nodes, grads, *x, gout.scale(*s)),
        Op::AddScalar(x) => accum(nodes, grads, *x, gout.clone()),
        Op::Exp(x) => accum(nodes, grads, *x, gout.zip(out, |g, y| g * y).unwrap()),
        Op::Ln(x) => {
            let xv = &nodes[x.0].value;
            accum(nodes, grads, *x, gout.zip(xv, |g, v| g / v).unwrap());
        }
        Op::Sqrt(x) => accum(nodes, grads, *x, gout.zip(out, |g, y| 0.5 * g / y).unwrap()),
        Op::Gelu(x) => {
            let xv = &nodes[x.0].value;
            accum(nodes, grads, *x, gout.zip(xv, |g, v| g * math::gelu_grad(v)).unwrap());
        }
        Op::Silu(x) => {
            let xv = &nodes[x.0].value;
            accum(nodes, grads, *x, gout.zip(xv, |g, v| g * math::silu_grad(v)).unwrap());
        }
        Op::Sum(x) => {
            let g = go[0];
            accum_with(nodes, grads, *x, |buf| buf.iter_mut().for_each(|v| *v = g));
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel() as f64;
            let g = go[0] / n;
            accum_with(nodes, grads, *x, |buf| buf.iter_mut().for_each(|v| *v = g));
        }
        Op::SumLast(x) => {
            let n = nodes[x.0].value.last_dim();
            accum_with(nodes, grads, *x, |buf| {
                for (j, v) in buf.iter_mut().enumerate() {
                    *v = go[j / n];
                }
            });
        }
        Op::MeanRows(x) => {
            let xv = &nodes[x.0].value;
            let (n, d) = (xv.dim(0), xv.dim(1));
            accum_with(nodes, grads, *x, |buf| {
                for (j, v) in buf.iter_mut().enumerate() {
                    *v = go[j % d] / n as f64;
                }
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let k = av.last_dim();
            let n = bv.dim(1);
            let m = av.numel() / k;
            accum_with(nodes, grads, *a, |buf| gemm(m, k, n, go, false, bv.data(), true, buf));
            accum_with(nodes, grads, *b, |buf| gemm(k, n, m, av.data(), true, go, false, buf));
        }
        Op::Bmm(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (bs, m, k) = (av.dim(0), av.dim(1), av.dim(2));
            let n = bv.dim(2);
            accum_with(nodes, grads, *a, |buf| {
                for i in 0..bs {
                    gemm(
                        m,
                        k,
                        n,
                        &go[i * m * n..(i + 1) * m * n],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        true,
                        &mut buf[i * m * k..(i + 1) * m * k],
                    );
                }
            });
            accum_with(nodes, grads, *b, |buf| {
                for i in 0..bs {
                    gemm(
                        k,
                        n,
                        m,
                        &av.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &go[i * m * n..(i + 1) * m * n],
                        false,
                        &mut buf[i * k * n..(i + 1) * k * n],
                    );
                }
            });
        }
        Op::Reshape(x) => {
            let shape = nodes[x.0].value.shape().to_vec();
            accum(nodes, grads, *x, Tensor::from_parts(shape, go.to_vec()));
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accum_with(nodes, grads, *x, |buf| kernels::permute(go, out.shape(), &inv, buf));
        }
        Op::Narrow { x, dim, start } => {
            let s = nodes[x.0].value.shape();
            let len = out.dim(*dim);
            let outer: usize = s[..*dim].iter().product();
            let inner: usize = s[dim + 1..].iter().product();
            accum_with(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    let dst = (o * s[*dim] + start) * inner;
                    let src = o * len * inner;
                    buf[dst..dst + len * inner].copy_from_slice(&go[src..src + len * inner]);
                }
            });
        }
        Op::Concat { xs, dim } => {
            let s = out.shape();
            let outer: usize = s[..*dim].iter().product();
            let inner: usize = s[dim + 1..].iter().product();
            let total = s[*dim];
            let mut offset = 0;
            for v in xs {
                let d = nodes[v.0].value.dim(*dim);
                accum_with(nodes, grads, *v, |buf| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        buf[o * d * inner..(o + 1) * d * inner].copy_from_slice(&go[src..src + d * inner]);
                    }
                });
                offset += d;
            }
        }
        Op::Softmax(x) => {
            let n = out.last_dim();
            accum_with(nodes, grads, *x, |buf| {
                for r in 0..out.rows() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let g = &go[r * n..(r + 1) * n];
                    let s = math::dot(y, g);
                    for j in 0..n {
                        buf[r * n + j] = y[j] * (g[j] - s);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let n = out.last_dim();
            accum_with(nodes, grads, *x, |buf| {
                for r in 0..out.rows() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let g = &go[r * n..(r + 1) * n];
                    let s: f64 = g.iter().sum();
                    for j in 0..n {
                        buf[r * n + j] = g[j] - math::exp(y[j]) * s;
                    }
                }
            });
        }
        Op::Normalize { x, width, xhat, rstd } => {
            accum_with(nodes, grads, *x, |buf| {
                kernels::normalize_rows_backward(go, xhat, rstd, *width, buf)
            });
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = kernels::Conv2dGeom::new(xv.shape(), wv.shape(), *stride, *pad);
            accum_with(nodes, grads, *x, |buf| geom.backward(xv.data(), wv.data(), go, Some(buf), None));
            accum_with(nodes, grads, *w, |buf| geom.backward(xv.data(), wv.data(), go, None, Some(buf)));
        }
        Op::Conv3d { x, w } => {
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = kernels::Conv3dGeom::new(xv.shape(), wv.shape());
            accum_with(nodes, grads, *x, |buf| geom.backward(xv.data(), wv.data(), go, Some(buf), None));
            accum_with(nodes, grads, *w, |buf| geom.backward(xv.data(), wv.data(), go, None, Some(buf)));
        }
        Op::Upsample2x(x) => {
            let xv = &nodes[x.0].value;
            let (b, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
            accum_with(nodes, grads, *x, |buf| {
                for bc in 0..b * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            buf[(bc * h + y / 2) * w + xx / 2] += go[(bc * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let d = out.dim(1);
            accum_with(nodes, grads, *table, |buf| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        buf[id * d + j] += go[r * d + j];
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
        } => {
            let v = nodes[logits.0].value.last_dim();
            let count = mask.iter().filter(|m| **m).count() as f64;
            let g = go[0] / count;
            accum_with(nodes, grads, *logits, |buf| {
                for (r, &active) in mask.iter().enumerate() {
                    if !active {
                        continue;
                    }
                    for j in 0..v {
                        buf[r * v + j] = g * probs[r * v + j];
                    }
                    buf[r * v + targets[r]] -= g;
                }
            });
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> ParamGrads {
        let mut out = ParamGrads::new();
        for (id, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                out.insert(*id, g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
