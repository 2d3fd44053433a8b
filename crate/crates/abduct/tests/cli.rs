use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1
[paths]
dataset_root = "data"
run_dir = "run"
[synth]
train_videos = 5
test_videos = 2
[hypotheses]
negatives = 6
candidates = 5
[contrast]
epochs = 2
d_joint = 16
d_model = 8
heads = 2
text_hidden = 16
lr = 1e-3
[reasoner]
vocab_size = 300
d_model = 16
heads = 2
layers = 1
[imaginer]
base_channels = 8
latent_hw = 8
d_text = 8
d_visual = 8
groups = 4
time_dim = 8
timesteps = 20
bridge_hidden = 8
[training]
stage1_lr = 1e-3
stage2_lr = 1e-4
[llm]
provider = "scripted"
"#;

fn abduct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abduct"))
        .args(args)
        .current_dir(dir)
        .env_remove("ABDUCT_LLM_API_KEY")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = abduct(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

const STAGES: [&str; 7] = [
    "gen-negatives",
    "gen-hypotheses",
    "train-contrast",
    "select",
    "train-stage1",
    "train-stage2",
    "evaluate",
];

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let dir = workspace();
    let out = abduct(dir.path(), &["--frobnicate", "select"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_config_exits_1_with_path() {
    let dir = workspace();
    let out = abduct(dir.path(), &["--config", "absent.toml", "select"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent.toml"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn invalid_config_exits_1() {
    let dir = workspace();
    let out = abduct(dir.path(), &["--config", "run.toml", "--alpha", "0", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(dir.path().join("bad.toml"), "[training]\nalhpa = 1.0\n").unwrap();
    let out = abduct(dir.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alhpa"));
}

#[test]
fn evaluate_files_prints_the_four_metrics() {
    let dir = workspace();
    let text = "a\tthey wash the big red pan in the kitchen\nb\tthey dry the small cup in the hall\n";
    fs::write(dir.path().join("p.tsv"), text).unwrap();
    fs::write(dir.path().join("r.tsv"), text).unwrap();
    let out = ok(dir.path(), &["evaluate", "--pred", "p.tsv", "--ref", "r.tsv"]);
    for name in ["bleu4", "meteor_lite", "rouge_l", "cider"] {
        assert!(out.contains(name), "{out}");
    }
    let bleu: f64 = out.lines().find(|l| l.starts_with("bleu4")).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(bleu, 100.0);
    assert!(!dir.path().join("run").exists(), "no run dir given, nothing written");
}

#[test]
fn dry_run_writes_nothing() {
    let dir = workspace();
    let before = files_under(dir.path());
    ok(dir.path(), &["--config", "run.toml", "--dry-run", "synth"]);
    assert_eq!(files_under(dir.path()), before);
    // Missing inputs are still reported.
    let out = abduct(dir.path(), &["--config", "run.toml", "--dry-run", "train-stage1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.train.tsv"));

    ok(dir.path(), &["--config", "run.toml", "synth"]);
    let before = files_under(dir.path());
    for stage in ["gen-negatives", "gen-hypotheses"] {
        ok(dir.path(), &["--config", "run.toml", "--dry-run", stage]);
    }
    assert_eq!(files_under(dir.path()), before);
}

#[test]
fn pipeline_end_to_end_is_deterministic_and_replayable() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "synth"]);
    for run in ["run", "again"] {
        for stage in STAGES {
            let mut args = vec!["--config", "run.toml", "--run-dir", run, stage];
            if stage == "gen-negatives" && run == "run" {
                args.extend(["--record-llm", "negatives.fixture.json"]);
            }
            ok(d, &args);
        }
    }
    let run = d.join("run");
    for f in ["config.toml", "negatives.jsonl", "candidates.jsonl", "topk.jsonl", "tokenizer.txt", "contrast.log.tsv", "report.txt", "report.json", "predictions.tsv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("contrast/epoch-000/index.tsv").is_file());
    assert!(run.join("stage1/reasoner/epoch-001/index.tsv").is_file());
    assert!(run.join("stage1/imaginer/final/index.tsv").is_file());
    assert!(run.join("stage2/epoch-000/meta.toml").is_file());
    let log = fs::read_to_string(run.join("scalars.stage2.tsv")).unwrap();
    assert_eq!(log.lines().next(), Some("step\tepoch\tce\tdiff\tjoint"));
    assert!(log.lines().count() > 1);

    // Identical config and seed give identical artifacts.
    let files = files_under(&run);
    assert_eq!(files, files_under(&d.join("again")));
    for f in files.iter().filter(|f| f.as_os_str() != "config.toml") {
        assert!(fs::read(run.join(f)).unwrap() == fs::read(d.join("again").join(f)).unwrap(), "{f:?} differs");
    }

    // Replaying the recorded fixture reproduces the negatives offline.
    ok(d, &["--config", "run.toml", "--run-dir", "replay", "--mock-llm", "negatives.fixture.json", "gen-negatives"]);
    assert_eq!(fs::read(run.join("negatives.jsonl")).unwrap(), fs::read(d.join("replay/negatives.jsonl")).unwrap());
    // The fixture is consumed in order, so hypotheses cannot be replayed from it.
    let out = abduct(d, &["--config", "run.toml", "--run-dir", "replay", "--mock-llm", "negatives.fixture.json", "gen-hypotheses"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fixture digest mismatch"));

    // Inference prints the explanation and writes the reasoner output.
    let text = ok(d, &["--config", "run.toml", "infer", "--sample", "test0000_m1"]);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("outputs/test0000_m1.json")).unwrap()).unwrap();
    assert_eq!(text.trim_end(), record["text"].as_str().unwrap());
    assert!(record["tokens"].is_array());
    assert_eq!(record["hypotheses"].as_array().unwrap().len(), 3);
    let preds = fs::read_to_string(run.join("predictions.tsv")).unwrap();
    assert!(preds.contains(&format!("test0000_m1\t{}", text.trim_end())));

    // A flag override changes what selection keeps.
    ok(d, &["--config", "run.toml", "--k", "2", "select"]);
    let line = fs::read_to_string(run.join("topk.jsonl")).unwrap();
    let set: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(set["hypotheses"].as_array().unwrap().len(), 2);
}

#[test]
fn stage2_without_stage1_fails() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "synth"]);
    for stage in ["gen-negatives", "gen-hypotheses", "train-contrast", "select"] {
        ok(d, &["--config", "run.toml", stage]);
    }
    let out = abduct(d, &["--config", "run.toml", "train-stage2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-stage1"));
}

#[test]
fn ingest_builds_masked_samples() {
    use abduct::sample_io::save_video;
    use abductive_core::data::{Event, VideoAnnotation};
    use abductive_core::Tensor;
    let dir = workspace();
    let ann = dir.path().join("ann");
    fs::create_dir_all(&ann).unwrap();
    for (vid, n) in [("v1", 3), ("v2", 1)] {
        let events = (0..n)
            .map(|i| Event::new(i, None, Some(Tensor::full(vec![2, 4], i as f64)), Some(format!("step {i}"))).unwrap())
            .collect();
        save_video(&ann, &VideoAnnotation { video_id: vid.into(), events }).unwrap();
    }
    let out = ok(dir.path(), &["--config", "run.toml", "ingest", "--input", "ann", "--split", "test"]);
    assert!(out.contains("3 samples from 2 videos (1 skipped)"), "{out}");
    let manifest = fs::read_to_string(dir.path().join("data/manifest.test.tsv")).unwrap();
    assert_eq!(manifest, "v1_m0\tv1\t0\nv1_m1\tv1\t1\nv1_m2\tv1\t2\n");
}
