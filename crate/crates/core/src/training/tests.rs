use super::*;
use crate::data::Event;
use crate::params::ParamId;
use crate::imaginer::tests::tiny_config;
use crate::text::HashingFeaturizer;
use alloc::string::ToString;
use alloc::vec;

fn tiny_model(seed: u64) -> AbductiveModel {
    let tok = Tokenizer::train(["cut the onion then fry the onion", "serve the soup"], 300);
    let mut r = ReasonerConfig::new(tok.vocab_size(), Some(4));
    r.d_model = 16;
    r.heads = 2;
    r.enc_layers = 1;
    r.dec_layers = 1;
    let cfg = ModelConfig {
        reasoner: r,
        imaginer: tiny_config(),
        bridge_hidden: 8,
        seed,
    };
    AbductiveModel::new(cfg, tok).unwrap()
}

fn sample(id: &str, shift: f64) -> Sample {
    let events = (0..3)
        .map(|i| {
            let v = 0.1 * i as f64 + shift;
            Event::new(i, Some(Tensor::full(vec![2, 8, 8, 3], v)), Some(Tensor::full(vec![2, 4], v + 0.5)), None).unwrap()
        })
        .collect();
    Sample::new(id, events, 1, Some("fry the onion".into()), None).unwrap()
}

fn examples(model: &AbductiveModel) -> Vec<TrainingExample> {
    let feat = HashingFeaturizer { dim: 4, seed: 1 };
    let ucfg = model.cfg.imaginer.unet;
    let embedder = ConditionEmbedder::new(4, 4, ucfg.d_visual, 9);
    let mapper = LatentMapper::new(ucfg.latent_hw, ucfg.latent_channels, 9);
    let b = ExampleBuilder {
        tokenizer: &model.tokenizer,
        featurizer: &feat,
        embedder: &embedder,
        mapper: &mapper,
        assemble: AssembleOptions::default(),
        m_local: model.cfg.imaginer.m_local,
        latent_frames: model.cfg.imaginer.diffusion.latent_frames,
    };
    let caps = vec!["cut the onion".to_string(), "serve the soup".to_string()];
    ["a_m1", "b_m1"]
        .iter()
        .enumerate()
        .map(|(i, id)| b.build(&sample(id, 0.2 * i as f64), &caps, &HypothesisSet::new(*id)).unwrap())
        .collect()
}

fn grads_for(model: &AbductiveModel, ex: &TrainingExample, plan: &TrainPlan) -> (f64, ParamGrads) {
    let g = Graph::new();
    let cx = Ctx::new(&g, &model.store);
    let l = example_losses(&cx, model, ex, plan, &mut Rng64::new(4)).unwrap();
    (g.item(l.total), g.backward(l.total).param_grads())
}

#[test]
fn joint_loss_value_and_gradient() {
    let g = Graph::new();
    let ce = g.leaf(Tensor::scalar(1.0));
    let diff = g.leaf(Tensor::scalar(0.2));
    let l = joint_loss(&g, ce, diff, 5.0).unwrap();
    assert!((g.item(l) - 2.0).abs() < 1e-12);
    let grads = g.backward(l);
    assert!((grads.wrt(diff).unwrap().item() - 5.0).abs() < 1e-12);
    assert!((grads.wrt(ce).unwrap().item() - 1.0).abs() < 1e-12);
    assert!(joint_loss(&g, ce, diff, 0.0).is_err());
}

#[test]
fn joint_objective_is_additive() {
    let model = tiny_model(1);
    let ex = &examples(&model)[0];
    let plan = TrainPlan::new(Stage::IIJoint, 0);
    let g = Graph::new();
    let cx = Ctx::new(&g, &model.store);
    let l = example_losses(&cx, &model, ex, &plan, &mut Rng64::new(4)).unwrap();
    let want = g.item(l.ce.unwrap()) + plan.alpha * g.item(l.diff.unwrap());
    assert!((g.item(l.total) - want).abs() < 1e-10);
}

#[test]
fn diffusion_gradient_reaches_reasoner() {
    let mut model = tiny_model(2);
    let ex = examples(&model).remove(0);
    let mut plan = TrainPlan::new(Stage::IIJoint, 0);
    plan.hooks.zero_ce = true;
    model.configure_trainable(&plan);
    // Zero-initialised adapters block the visual path but the text cross
    // attention still carries gradient back through the bridge.
    let (_, grads) = grads_for(&model, &ex, &plan);
    let n = grads.norm_where(&model.store, |n| n.starts_with(crate::reasoner::PREFIX));
    assert!(n > 0.0, "reasoner grad norm {n}");
    plan.hooks.detach_diffusion = true;
    let (_, grads) = grads_for(&model, &ex, &plan);
    assert_eq!(grads.norm_where(&model.store, |n| n.starts_with(crate::reasoner::PREFIX)), 0.0);
}

#[test]
fn detached_joint_matches_ce_only_run() {
    let base = tiny_model(3);
    let exs = examples(&base);
    let ckpt = Stage1Checkpoints {
        reasoner: Some(base.store.clone()),
        imaginer: Some(base.store.clone()),
    };
    let mut detached = base.clone();
    let mut plan = TrainPlan::new(Stage::IIJoint, 11);
    plan.epochs = 2;
    plan.optim.lr = 1e-3;
    plan.hooks.detach_diffusion = true;
    run_stage2(&plan, &mut detached, &exs, &ckpt).unwrap();

    let mut ce_only = base.clone();
    let mut plan_ce = plan.clone();
    plan_ce.hooks.detach_diffusion = false;
    plan_ce.use_imaginer = false;
    run_stage2(&plan_ce, &mut ce_only, &exs, &ckpt).unwrap();

    for (id, p) in ce_only.store.iter().filter(|(_, p)| p.name.starts_with(crate::reasoner::PREFIX)) {
        assert_eq!(p.value, *detached.store.value(id), "{}", p.name);
    }
    assert_ne!(ce_only.store, base.store);
}

#[test]
fn stage1_imaginer_trains_adapters_only() {
    let mut model = tiny_model(4);
    let exs = examples(&model);
    let frozen: Vec<(ParamId, Tensor)> = model
        .store
        .iter()
        .filter(|(_, p)| !p.name.starts_with(BRIDGE_PREFIX) && !is_adapter_param(&p.name))
        .map(|(id, p)| (id, p.value.clone()))
        .collect();
    let mut plan = TrainPlan::new(Stage::IImaginer, 5);
    plan.optim.lr = 3e-3;
    plan.epochs = 30;
    let mut losses = Vec::new();
    run_stage1_with(&plan, Stage1Input::Pipeline { model: &mut model, examples: &exs }, |e| {
        if let TrainEvent::Step(r) = e {
            losses.push(r.joint);
        }
    })
    .unwrap();
    for (id, v) in frozen {
        assert_eq!(model.store.value(id), &v, "{}", model.store.name(id));
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "diffusion loss {head} -> {tail}");
}

#[test]
fn stage1_reasoner_lowers_ce() {
    let mut model = tiny_model(5);
    let exs = examples(&model);
    let mut plan = TrainPlan::new(Stage::IReasoner, 6);
    plan.optim.lr = 3e-3;
    plan.epochs = 15;
    let out = run_stage1(&plan, Stage1Input::Pipeline { model: &mut model, examples: &exs }).unwrap();
    let Stage1Output::Pipeline(report) = out else { panic!("wrong output") };
    let first = report.records[0].ce.unwrap();
    let last = report.records.last().unwrap().ce.unwrap();
    assert!(last < first * 0.5, "{first} -> {last}");
    assert!(report.records.iter().all(|r| r.diff.is_none()));
}

#[test]
fn stage2_requires_checkpoints() {
    let mut model = tiny_model(6);
    let exs = examples(&model);
    let plan = TrainPlan::new(Stage::IIJoint, 0);
    let err = run_stage2(&plan, &mut model, &exs, &Stage1Checkpoints::default()).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn stage_plan_defaults() {
    assert_eq!(TrainPlan::new(Stage::IReasoner, 0).optim.lr, 1e-4);
    assert_eq!(TrainPlan::new(Stage::IIJoint, 0).optim.lr, 1e-5);
    assert_eq!(TrainPlan::new(Stage::IIJoint, 0).alpha, 5.0);
}

#[test]
fn mismatched_stage_input_rejected() {
    let mut model = tiny_model(7);
    let exs = examples(&model);
    let plan = TrainPlan::new(Stage::IContrast, 0);
    assert!(run_stage1(&plan, Stage1Input::Pipeline { model: &mut model, examples: &exs }).is_err());
}
