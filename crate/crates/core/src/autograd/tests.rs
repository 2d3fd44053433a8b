use super::*;
use crate::gradcheck::{central_diff, rel_error};
use crate::rng::Rng64;

fn rand_tensor(rng: &mut Rng64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).unwrap()
}

/// Checks d/dx of `Σ r ⊙ f(x)` for every input against central differences.
fn check(inputs: &[Tensor], f: impl Fn(&Graph, &[Var]) -> Var) {
    let mut rng = Rng64::new(99);
    let g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &leaves);
    let proj = rand_tensor(&mut rng, &g.shape(out));
    let loss = g.sum(g.mul(out, g.constant(proj.clone())));
    let grads = g.backward(loss);

    for (k, input) in inputs.iter().enumerate() {
        let fd = central_diff(input.data(), 1e-6, |x| {
            let g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        g.constant(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect();
            let out = f(&g, &vars);
            let v = g.value(out);
            v.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        });
        let an = grads.wrt(leaves[k]).expect("gradient present");
        let err = rel_error(an.data(), &fd);
        assert!(err < 1e-6, "input {k}: rel err {err}");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = Rng64::new(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]).map(|v| v.abs() + 0.5);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.div(v[0], v[1]));
    check(&[a.clone()], |g, v| g.exp(v[0]));
    check(&[b.clone()], |g, v| g.ln(v[0]));
    check(&[b.clone()], |g, v| g.sqrt(v[0]));
    check(&[a.clone()], |g, v| g.gelu(v[0]));
    check(&[a.clone()], |g, v| g.silu(v[0]));
    check(&[a.clone()], |g, v| g.add_scalar(g.scale(v[0], 2.5), 1.0));
}

#[test]
fn broadcast_and_reductions() {
    let mut rng = Rng64::new(2);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let chan = rand_tensor(&mut rng, &[3]);
    check(&[x.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]));
    check(&[x.clone(), row.clone()], |g, v| g.mul_row(v[0], v[1]));
    check(&[x.clone(), chan.clone()], |g, v| g.add_channel(v[0], v[1]));
    check(&[x.clone(), chan.clone()], |g, v| g.mul_channel(v[0], v[1]));
    check(&[x.clone()], |g, v| g.sum(v[0]));
    check(&[x.clone()], |g, v| g.mean(v[0]));
    check(&[x.clone()], |g, v| g.sum_last(v[0]));
    let m = rand_tensor(&mut rng, &[5, 3]);
    check(&[m], |g, v| g.mean_rows(v[0]));
    let a = rand_tensor(&mut rng, &[6]);
    let b = rand_tensor(&mut rng, &[6]);
    check(&[a, b], |g, v| g.cosine(v[0], v[1]));
}

#[test]
fn matmul_and_layout() {
    let mut rng = Rng64::new(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    check(&[a.clone(), w], |g, v| g.matmul(v[0], v[1]));
    let b = rand_tensor(&mut rng, &[2, 4, 3]);
    check(&[a.clone(), b], |g, v| g.bmm(v[0], v[1]));
    check(&[a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(&[a.clone()], |g, v| g.transpose(v[0]));
    check(&[a.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check(&[a.clone()], |g, v| g.narrow(v[0], 1, 1, 2));
    let c = rand_tensor(&mut rng, &[2, 1, 4]);
    check(&[a.clone(), c], |g, v| g.concat(&[v[0], v[1]], 1));
    let table = rand_tensor(&mut rng, &[5, 3]);
    check(&[table], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
}

#[test]
fn permute_matches_index_formula() {
    let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
    let g = Graph::new();
    let p = g.permute(g.constant(t.clone()), &[1, 2, 0]);
    let out = g.value(p);
    assert_eq!(out.shape(), &[3, 4, 2]);
    for i in 0..3 {
        for j in 0..4 {
            for k in 0..2 {
                assert_eq!(out.data()[(i * 4 + j) * 2 + k], t.data()[(k * 3 + i) * 4 + j]);
            }
        }
    }
}

#[test]
fn softmax_family_and_norms() {
    let mut rng = Rng64::new(4);
    let x = rand_tensor(&mut rng, &[3, 5]);
    check(&[x.clone()], |g, v| g.softmax(v[0]));
    check(&[x.clone()], |g, v| g.log_softmax(v[0]));
    check(&[x.clone()], |g, v| g.layer_norm(v[0], 1e-5));
    let img = rand_tensor(&mut rng, &[2, 4, 3, 3]);
    check(&[img], |g, v| g.group_norm(v[0], 2, 1e-5));
}

#[test]
fn convolutions_and_upsampling() {
    let mut rng = Rng64::new(5);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    check(&[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1));
    check(&[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 2, 1));
    let w3 = rand_tensor(&mut rng, &[2, 3, 3, 1, 3]);
    check(&[x.clone(), w3], |g, v| g.conv3d(v[0], v[1]));
    check(&[x], |g, v| g.upsample2x(v[0]));
}

#[test]
fn conv3d_replicate_padding_single_frame() {
    // a temporal kernel over one frame sees that frame at every tap
    let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
    let w = Tensor::new(vec![1, 1, 3, 1, 1], vec![1.0, 10.0, 100.0]).unwrap();
    let g = Graph::new();
    let y = g.conv3d(g.constant(x), g.constant(w));
    assert_eq!(g.value(y).data(), &[222.0]);
}

#[test]
fn cross_entropy_gradient_and_masking() {
    let mut rng = Rng64::new(6);
    let logits = rand_tensor(&mut rng, &[4, 6]);
    check(&[logits.clone()], |g, v| {
        g.cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true])
    });
    let g = Graph::new();
    let l = g.cross_entropy(g.constant(Tensor::zeros(vec![2, 10])), &[3, 4], &[true, true]);
    assert!((g.item(l) - math::ln(10.0)).abs() < 1e-12);
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::new();
    let mut rng = Rng64::new(7);
    let a = store.add_xavier("a", &[2, 2], 2, 2, &mut rng);
    let b = store.add_xavier("b", &[2, 2], 2, 2, &mut rng);
    store.set_trainable(b, false);
    let g = Graph::new();
    let cx = Ctx::new(&g, &store);
    let loss = g.sum(g.mul(cx.p(a), cx.p(b)));
    let grads = g.backward(loss).param_grads();
    assert!(grads.get(a).is_some());
    assert!(grads.get(b).is_none());
}

#[test]
fn param_leaf_is_shared_within_a_graph() {
    let mut store = ParamStore::new();
    let a = store.add_full("a", &[1], 3.0);
    let g = Graph::new();
    let cx = Ctx::new(&g, &store);
    let y = g.mul(cx.p(a), cx.p(a));
    let grads = g.backward(g.sum(y));
    assert_eq!(grads.param(a).unwrap().data(), &[6.0]);
}

#[test]
fn cosine_rows_and_scalar_broadcast() {
    let mut rng = Rng64::new(12);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5]);
    let s = rand_tensor(&mut rng, &[1]);
    check(&[a.clone(), b.clone()], |g, v| g.cosine_rows(v[0], v[1]));
    check(&[a.clone(), s], |g, v| g.mul_scalar(v[0], v[1]));
    check(&[a.clone()], |g, v| g.normalize_rows(v[0]));
    let g = Graph::new();
    let u = g.value(g.normalize_rows(g.constant(a.clone())));
    assert!((0..4).all(|r| (crate::math::norm(u.row(r)) - 1.0).abs() < 1e-12));

    let g = Graph::new();
    let c = g.value(g.cosine_rows(g.constant(a.clone()), g.constant(b.clone())));
    for r in 0..4 {
        let want = crate::math::dot(a.row(r), b.data()) / (crate::math::norm(a.row(r)) * crate::math::norm(b.data()));
        assert!((c.data()[r] - want).abs() < 1e-12);
    }
}
