use std::path::PathBuf;
use std::process::ExitCode;

use abduct::config::{Overrides, RunConfig};
use abduct::pipeline::{pair_files, Pipeline};
use abductive_core::data::Split;
use abductive_core::metrics::evaluate;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "abduct", version, about = "Visual abductive reasoning pipeline")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Replay language-model replies from this fixture instead of calling out.
    #[arg(long, global = true, value_name = "FIXTURE")]
    mock_llm: Option<PathBuf>,
    /// Record every language-model exchange to this fixture.
    #[arg(long, global = true, value_name = "FIXTURE")]
    record_llm: Option<PathBuf>,
    /// Hypotheses kept by top-k selection.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Weight of the diffusion term in the joint loss.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Validate config and inputs without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build masked-event samples from per-video annotation documents.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Write a synthetic train/test corpus to the dataset root.
    Synth,
    /// Generate candidate hypotheses for every sample.
    GenHypotheses,
    /// Generate hard negatives for every training sample.
    GenNegatives,
    /// Train the contrastive hypothesis selector.
    TrainContrast,
    /// Keep the top-k candidates per sample.
    Select,
    /// Independent reasoner and imaginer training.
    TrainStage1,
    /// Joint end-to-end training.
    TrainStage2,
    /// Explain one sample with the final model.
    Infer {
        /// Sample document path or sample id in the dataset.
        #[arg(long)]
        sample: String,
    },
    /// Score predictions against references, or the final model on the test split.
    Evaluate {
        #[arg(long, requires = "reference")]
        pred: Option<PathBuf>,
        #[arg(long = "ref", requires = "pred")]
        reference: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> abduct::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        run_dir: cli.run_dir.clone(),
        fixture: cli.mock_llm.clone(),
        k: cli.k,
        alpha: cli.alpha,
    });
    cfg.validate()?;
    let writes_report = cli.config.is_some() || cli.run_dir.is_some();
    let mut p = Pipeline::new(cfg, cli.dry_run);
    p.record = cli.record_llm;
    let msg = match cli.command {
        Command::Ingest { input, split } => p.ingest(&input, split.into())?,
        Command::Synth => p.synth()?,
        Command::GenHypotheses => p.gen_hypotheses()?,
        Command::GenNegatives => p.gen_negatives()?,
        Command::TrainContrast => p.train_contrast()?,
        Command::Select => p.select()?,
        Command::TrainStage1 => p.train_stage1()?,
        Command::TrainStage2 => p.train_stage2()?,
        Command::Infer { sample } => p.infer(&sample)?.prediction.text,
        Command::Evaluate { pred, reference } => {
            let report = match (pred, reference) {
                (Some(pred), Some(reference)) => {
                    let report = evaluate(&pair_files(&pred, &reference)?, &[])?;
                    if writes_report && !p.dry_run {
                        p.write_report(&p.cfg.paths.run_dir, &report)?;
                    }
                    report
                }
                _ => p.evaluate_model()?,
            };
            report.to_table().trim_end().to_string()
        }
    };
    println!("{msg}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
