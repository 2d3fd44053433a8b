mod common;

use abductive_core::rng::Rng64;
use abductive_core::training::{
    example_losses, run_stage1, run_stage1_with, run_stage2_with, AbductiveModel, Stage, Stage1Checkpoints, Stage1Input,
    TrainEvent, TrainPlan,
};
use abductive_core::{Ctx, Graph, ParamGrads};
use common::{examples, mean, model_for, samples};

const LR_IMAGINER: f64 = 1e-2;

fn plan(stage: Stage, lr: f64, steps: usize, n: usize) -> TrainPlan {
    let mut p = TrainPlan::new(stage, 17);
    p.optim.lr = lr;
    p.epochs = steps.div_ceil(n);
    p.max_steps = Some(steps);
    p.checkpoint_every = 0;
    p
}

fn joints(mut f: impl FnMut(&mut dyn FnMut(TrainEvent))) -> Vec<f64> {
    let mut out = Vec::new();
    f(&mut |e| {
        if let TrainEvent::Step(r) = e {
            out.push(r.joint);
        }
    });
    out
}

/// Mean stage loss with the same timesteps and noise on every call.
fn fixed_eval(model: &AbductiveModel, plan: &TrainPlan, exs: &[abductive_core::training::TrainingExample]) -> f64 {
    let mut rng = Rng64::new(77);
    let mut out = Vec::new();
    for _ in 0..4 {
        for ex in exs {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &model.store);
            out.push(g.item(example_losses(&cx, model, ex, plan, &mut rng).unwrap().total));
        }
    }
    mean(&out)
}

#[test]
fn imaginer_stage_lowers_diffusion_loss() {
    let (s, feat) = samples(20, 1);
    let mut model = model_for(&s, 1);
    let exs = examples(&model, &s, &feat);
    let p = plan(Stage::IImaginer, LR_IMAGINER, 200, exs.len());
    let before = fixed_eval(&model, &p, &exs);
    let losses = joints(|cb| {
        run_stage1_with(&p, Stage1Input::Pipeline { model: &mut model, examples: &exs }, cb).unwrap();
    });
    assert_eq!(losses.len(), 200);
    let after = fixed_eval(&model, &p, &exs);
    eprintln!("diffusion loss {before:.4} -> {after:.4}");
    assert!(after < 0.9 * before, "diffusion loss {before} -> {after}");
}

fn joint_run(seed: u64) -> (AbductiveModel, Vec<f64>) {
    let (s, feat) = samples(50, seed);
    let mut model = model_for(&s, seed);
    let exs = examples(&model, &s, &feat);
    let p1 = plan(Stage::IReasoner, 3e-3, 50, exs.len());
    run_stage1(&p1, Stage1Input::Pipeline { model: &mut model, examples: &exs }).unwrap();
    let ckpt = Stage1Checkpoints {
        reasoner: Some(model.store.clone()),
        imaginer: Some(model.store.clone()),
    };
    let p2 = plan(Stage::IIJoint, 1e-3, 200, exs.len());
    let losses = joints(|cb| {
        run_stage2_with(&p2, &mut model, &exs, &ckpt, cb).unwrap();
    });
    (model, losses)
}

#[test]
fn joint_stage_lowers_loss_and_is_bitwise_deterministic() {
    let (a, la) = joint_run(2);
    assert_eq!(la.len(), 200);
    let (head, tail) = (mean(&la[..50]), mean(&la[150..]));
    assert!(tail < head, "joint loss {head} -> {tail}");
    let (b, lb) = joint_run(2);
    assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert!(p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", p.name);
    }
}

fn grads(model: &AbductiveModel, plan: &TrainPlan, ex: &abductive_core::training::TrainingExample) -> (f64, ParamGrads) {
    let g = Graph::new();
    let cx = Ctx::new(&g, &model.store);
    let l = example_losses(&cx, model, ex, plan, &mut Rng64::new(9)).unwrap();
    (g.item(l.total), g.backward(l.total).param_grads())
}

#[test]
fn joint_gradient_is_ce_plus_alpha_diffusion() {
    let (s, feat) = samples(3, 4);
    let mut model = model_for(&s, 4);
    let exs = examples(&model, &s, &feat);
    let mut full = TrainPlan::new(Stage::IIJoint, 0);
    full.alpha = 5.0;
    model.configure_trainable(&full);
    // Non-zero adapters so the visual branch contributes too.
    let mut rng = Rng64::new(5);
    for id in model.imaginer.adapter_params(&model.store) {
        let n = model.store.value(id).numel();
        let v = rng.normals(n).into_iter().map(|x| 0.1 * x).collect::<Vec<_>>();
        model.store.value_mut(id).data_mut().copy_from_slice(&v);
    }
    let mut ce_only = full.clone();
    ce_only.use_imaginer = false;
    let mut diff_only = full.clone();
    diff_only.hooks.zero_ce = true;
    for ex in &exs {
        let (lt, gt) = grads(&model, &full, ex);
        let (lc, gc) = grads(&model, &ce_only, ex);
        let (ld, gd) = grads(&model, &diff_only, ex);
        assert!((lt - (lc + ld)).abs() < 1e-10);
        let mut sum = gc.clone();
        sum.accumulate(&gd);
        let mut n = 0;
        for (id, g) in gt.iter() {
            let want = sum.get(id).expect("gradient present in a term");
            let scale = 1.0 + g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(g.max_abs_diff(want) <= 1e-10 * scale, "{}", model.store.name(id));
            n += 1;
        }
        assert_eq!(n, sum.len());
        assert!(gd.norm_where(&model.store, |n| n.starts_with("reasoner")) > 0.0);
    }
}
