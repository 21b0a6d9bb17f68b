//! `rdd` — train, distill, sample, and evaluate small diffusion
//! denoisers. One command runs one operation in one process; every
//! training or evaluation run leaves its resolved config, a
//! line-delimited metrics stream, and a provenance record in its run
//! directory.

mod config;
mod ops;

use clap::{Parser, Subcommand};
use rdd_core::trainer::Method;
use std::path::PathBuf;

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "relational" => Ok(Method::Relational),
        "pooled-feature" => Ok(Method::PooledFeature),
        "step-match" => Ok(Method::StepMatch),
        _ => Err(format!(
            "unknown method {s:?} (expected relational, pooled-feature, or step-match)"
        )),
    }
}

#[derive(Parser)]
#[command(name = "rdd", version, about = "Distillation toolkit for few-step diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier whose features supervise distillation and
    /// back the desk metrics.
    PretrainClassifier {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: <output_dir>/classifier).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Train the many-step base denoiser.
    TrainBase {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: <output_dir>/base).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Progressively halve a teacher's step count down to the
    /// configured budget, writing one student checkpoint per stage.
    Distill {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint (a base model or an earlier student).
        #[arg(long)]
        teacher: PathBuf,
        /// Pretrained classifier checkpoint used as the feature
        /// extractor.
        #[arg(long)]
        extractor: PathBuf,
        /// Override the configured method: relational, pooled-feature,
        /// or step-match.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Drop the cross-instance relation term.
        #[arg(long)]
        no_instance_set: bool,
        /// Drop the memory-bank relation term.
        #[arg(long)]
        no_memory: bool,
        /// Add the direct step-matching term on top of the feature
        /// losses.
        #[arg(long)]
        add_step_match: bool,
        /// Run directory (default: <output_dir>/distill).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Sample images from a checkpoint into a PNG grid.
    Sample {
        /// Denoiser checkpoint to sample from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampler steps (default: the checkpoint's step count).
        #[arg(long)]
        steps: Option<u32>,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Seed for the per-sample noise streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Grid columns (default: ceil(sqrt(count))).
        #[arg(long)]
        cols: Option<usize>,
    },
    /// Score a checkpoint against the dataset's reference feature
    /// statistics.
    Evaluate {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Denoiser checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Classifier checkpoint that computes the metric features.
        #[arg(long)]
        classifier: PathBuf,
        /// Sampler steps (default: the checkpoint's step count).
        #[arg(long)]
        steps: Option<u32>,
        /// Number of samples to score (default: from config).
        #[arg(long)]
        n_samples: Option<usize>,
        /// Sampling seed (default: the config seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: <output_dir>/eval).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PretrainClassifier { config, run_dir } => {
            ops::cmd_pretrain_classifier(&config, run_dir)
        }
        Command::TrainBase { config, run_dir } => ops::cmd_train_base(&config, run_dir),
        Command::Distill {
            config,
            teacher,
            extractor,
            method,
            no_instance_set,
            no_memory,
            add_step_match,
            run_dir,
        } => ops::cmd_distill(ops::DistillArgs {
            config,
            teacher,
            extractor,
            method,
            no_instance_set,
            no_memory,
            add_step_match,
            run_dir,
        }),
        Command::Sample { checkpoint, steps, count, seed, out, cols } => {
            ops::cmd_sample(ops::SampleArgs { checkpoint, steps, count, seed, out, cols })
        }
        Command::Evaluate {
            config,
            checkpoint,
            classifier,
            steps,
            n_samples,
            seed,
            run_dir,
        } => ops::cmd_evaluate(ops::EvaluateArgs {
            config,
            checkpoint,
            classifier,
            steps,
            n_samples,
            seed,
            run_dir,
        }),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
