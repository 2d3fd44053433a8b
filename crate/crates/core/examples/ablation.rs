//! Four-arm ablation on the synthetic world. Seeds are positional args.
//! Env overrides: S1 S2 (stage epochs), DM LAYERS LR1 (reasoner), TRAINV,
//! CEP LRC CBS DJ CDM (selector), FD (feature dim), ARMS (indices into Arm::ALL).

use abductive_core::experiment::{prepare_world, run_arm, Arm, ExperimentConfig};
use std::time::Instant;

fn main() {
    let mut cfg = ExperimentConfig::default();
    let env = |k: &str| std::env::var(k).ok();
    if let Some(v) = env("S1") { cfg.stage1_epochs = v.parse().unwrap(); }
    if let Some(v) = env("S2") { cfg.stage2_epochs = v.parse().unwrap(); }
    if let Some(v) = env("DM") { cfg.reasoner_d_model = v.parse().unwrap(); }
    if let Some(v) = env("LAYERS") { cfg.reasoner_layers = v.parse().unwrap(); }
    if let Some(v) = env("LR1") { cfg.stage1_lr = v.parse().unwrap(); }
    if let Some(v) = env("TRAINV") { cfg.train_videos = v.parse().unwrap(); }
    if let Some(v) = env("CEP") { cfg.contrast.epochs = v.parse().unwrap(); }
    if let Some(v) = env("FD") { cfg.feature_dim = v.parse().unwrap(); }
    if let Some(v) = env("LRC") { cfg.contrast.lr = v.parse().unwrap(); }
    if let Some(v) = env("CBS") { cfg.contrast.batch_size = v.parse().unwrap(); }
    if let Some(v) = env("DJ") { cfg.contrast.d_joint = v.parse().unwrap(); }
    if let Some(v) = env("CDM") { cfg.contrast.d_model = v.parse().unwrap(); }
    let arms: Vec<Arm> = match env("ARMS") {
        Some(a) => a.split(',').filter(|x| !x.is_empty()).map(|x| Arm::ALL[x.parse::<usize>().unwrap()]).collect(),
        None => Arm::ALL.to_vec(),
    };
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    for seed in if seeds.is_empty() { vec![0] } else { seeds } {
        let t = Instant::now();
        let world = prepare_world(&cfg, seed).unwrap();
        println!(
            "seed {seed}: train {} test {} selector acc {:.3} test hit {:.3} ({:.1}s)",
            world.train.len(),
            world.test.len(),
            world.selector_accuracy,
            world.selector_test_hit,
            t.elapsed().as_secs_f64()
        );
        for &arm in &arms {
            let t = Instant::now();
            let r = run_arm(&world, &cfg, arm).unwrap();
            let exact = r
                .predictions
                .iter()
                .zip(&world.test)
                .filter(|((_, p), s)| Some(p.as_str()) == s.explanation.as_deref())
                .count() as f64
                / world.test.len() as f64;
            println!(
                "  {:<16} exact {exact:.3} cider {:.3} bleu {:.2} rouge {:.2} ({:.1}s) e.g. {:?}",
                arm.name(),
                r.cider(),
                r.report.score("bleu4").unwrap(),
                r.report.score("rouge_l").unwrap(),
                t.elapsed().as_secs_f64(),
                &r.predictions[..2]
            );
        }
    }
}
