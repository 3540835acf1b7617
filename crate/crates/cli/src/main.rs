//! `uqasr`: drive the experiment pipeline from dataset synthesis through
//! training, attacks, uncertainty measurement, detection, and reporting.
//!
//! Exit codes: 0 success, 1 usage error, 2 precondition or artifact error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uqasr_core::acoustic::ModelKind;
use uqasr_core::config::ExperimentConfig;
use uqasr_core::dataset::Split;
use uqasr_core::pipeline;

#[derive(Parser)]
#[command(name = "uqasr", version, about = "Hybrid HMM-DNN digit recognizer workbench: uncertainty-aware acoustic models, targeted PGD audio attacks, and one-class adversarial-example detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply for every missing key.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-utterance parallelism (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ModelArg {
    /// Acoustic model family; default runs every model in the config.
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic digit dataset (all four splits).
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train an acoustic model: flat start, cross-entropy epochs, then
    /// Viterbi-training epochs; writes the checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Force-align a split with a trained model and write the alignment file.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// Dataset split to align.
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
    },
    /// Generate targeted adversarial examples over the attack grid.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// Restrict to one grid budget (repeatable).
        #[arg(long = "epsilon")]
        epsilons: Vec<f64>,
    },
    /// Compute uncertainty scores for the held-out, benign, and
    /// adversarial sets.
    Measure {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Fit Gaussian detectors on held-out scores and report AUROC.
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Benign accuracy, attack curves, and detection tables for one model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Cross-model plot data (accuracy curves, AUROC summary, histograms).
    Report {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common, .. }
            | Command::Train { common, .. }
            | Command::Align { common, .. }
            | Command::Attack { common, .. }
            | Command::Measure { common, .. }
            | Command::Detect { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Report { common } => common,
        }
    }
}

fn load_config(common: &Common) -> uqasr_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn models_to_run(cfg: &ExperimentConfig, arg: &ModelArg) -> Vec<ModelKind> {
    match arg.model {
        Some(kind) => vec![kind],
        None => cfg.run.models.clone(),
    }
}

fn run(cli: Cli) -> uqasr_core::Result<()> {
    let common = cli.command.common();
    if let Some(n) = common.workers {
        // Worker count affects wall time only; outputs reduce in utterance
        // order regardless.
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| uqasr_core::Error::Other(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(common)?;

    match &cli.command {
        Command::SynthData { force, .. } => {
            let report = pipeline::cmd_synth_data(&cfg, *force)?;
            for (split, n) in report.sizes {
                println!("synth {}: {} utterances", split.as_str(), n);
            }
        }
        Command::Train { model, .. } => {
            for kind in models_to_run(&cfg, model) {
                let report = pipeline::cmd_train(&cfg, kind)?;
                println!(
                    "trained {}: ce losses {:?}, checkpoint {}",
                    kind.as_str(),
                    report.ce_losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>(),
                    report.checkpoint_dir.display()
                );
            }
        }
        Command::Align { model, split, .. } => {
            for kind in models_to_run(&cfg, model) {
                let report = pipeline::cmd_align(&cfg, kind, *split)?;
                println!(
                    "aligned {} {}: {} utterances ({} skipped) -> {}",
                    kind.as_str(),
                    split.as_str(),
                    report.aligned,
                    report.skipped.len(),
                    report.path.display()
                );
            }
        }
        Command::Attack { model, epsilons, .. } => {
            let filter = if epsilons.is_empty() { None } else { Some(epsilons.as_slice()) };
            for kind in models_to_run(&cfg, model) {
                let report = pipeline::cmd_attack(&cfg, kind, filter)?;
                for s in &report.per_eps {
                    println!(
                        "attack {} eps {:.2}: {} attacked ({} aborted), acc_vs_target {:.3}, acc_vs_original {:.3}",
                        kind.as_str(),
                        s.epsilon,
                        s.attacked,
                        s.aborted,
                        s.mean_acc_target,
                        s.mean_acc_original
                    );
                }
            }
        }
        Command::Measure { model, .. } => {
            for kind in models_to_run(&cfg, model) {
                let report = pipeline::cmd_measure(&cfg, kind)?;
                println!("measured {}: {} score files", kind.as_str(), report.files.len());
            }
        }
        Command::Detect { model, .. } => {
            for kind in models_to_run(&cfg, model) {
                let report = pipeline::cmd_detect(&cfg, kind)?;
                for (measure, eps, auroc) in &report.auroc {
                    match auroc {
                        Some(a) => println!(
                            "detect {} {} eps {:.2}: AUROC {:.4}",
                            kind.as_str(),
                            measure.as_str(),
                            eps,
                            a
                        ),
                        None => println!(
                            "detect {} {} eps {:.2}: n/a",
                            kind.as_str(),
                            measure.as_str(),
                            eps
                        ),
                    }
                }
            }
        }
        Command::Evaluate { model, .. } => {
            for kind in models_to_run(&cfg, model) {
                let report = pipeline::cmd_evaluate(&cfg, kind)?;
                println!(
                    "evaluate {}: benign accuracy {:.4} over {} utterances",
                    kind.as_str(),
                    report.benign_accuracy,
                    report.benign_count
                );
                for (eps, n, t, o) in &report.accuracy_rows {
                    println!(
                        "  eps {eps:.2} ({n} attacked): acc_vs_target {t:.3}, acc_vs_original {o:.3}"
                    );
                }
            }
        }
        Command::Report { .. } => {
            let out = pipeline::cmd_report(&cfg)?;
            for f in out.files {
                println!("report: {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; anything else
            // is a usage error (exit code 1).
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
