use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use trilandmark_cli::commands::{
    classify_command, eval_command, saliency_command, synthesize, train_command, LandmarkSource, Output,
};
use trilandmark_cli::config::{Overrides, RunConfig};
use trilandmark_cli::exit_code;

#[derive(Parser)]
#[command(name = "trilandmark", version, about = "Ordered landmark discovery experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration with [cohort], [model], [loss], [train],
    /// [eval] and [classify] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the cohort, model initialization, triplet sampling and
    /// cross-validation folds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads. Every command runs on one thread, so results do not
    /// depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort directory.
    Synthesize {
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Train the proposal network on a cohort.
    Train {
        cohort: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory of external registration fields named
        /// `field_<target>_<source>.ltf`; the cohort's oracle otherwise.
        #[arg(long)]
        fields: Option<PathBuf>,
    },
    /// Consistency metrics of a checkpoint's landmarks on held-out subjects.
    Eval {
        cohort: PathBuf,
        /// Checkpoint directory.
        #[arg(required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the cohort's ground-truth landmarks instead.
        #[arg(long, conflicts_with = "checkpoint")]
        ground_truth: bool,
    },
    /// Procrustes alignment and DWD classification of progression.
    Classify {
        cohort: PathBuf,
        checkpoint: PathBuf,
        /// Retrain on the `k` most important landmarks only.
        #[arg(long)]
        landmarks_top_k: Option<usize>,
        /// Comma-separated landmark counts for a top-k retraining table.
        #[arg(long, value_delimiter = ',')]
        top_k_curve: Vec<usize>,
    },
    /// Gradient saliency of one landmark with respect to image intensities.
    Saliency {
        checkpoint: PathBuf,
        /// LTF1 image file.
        image: PathBuf,
        index: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let g = &cli.global;
    let mut overrides = Overrides {
        seed: g.seed,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Synthesize { subjects } => overrides.subjects = *subjects,
        Command::Train { epochs, .. } => overrides.epochs = *epochs,
        Command::Classify { landmarks_top_k, .. } => overrides.top_k = *landmarks_top_k,
        _ => {}
    }
    let out = Output::new(&g.out, g.force);
    let result = RunConfig::resolve(g.config.as_deref(), &overrides).and_then(|cfg| match &cli.command {
        Command::Synthesize { .. } => synthesize(&cfg, &out).map(drop),
        Command::Train { cohort, fields, .. } => train_command(&cfg, cohort, fields.as_deref(), &out).map(drop),
        Command::Eval {
            cohort,
            checkpoint,
            ground_truth,
        } => {
            let source = match checkpoint {
                Some(p) if !ground_truth => LandmarkSource::Model(p),
                _ => LandmarkSource::GroundTruth,
            };
            eval_command(&cfg, cohort, source, &out).map(drop)
        }
        Command::Classify {
            cohort,
            checkpoint,
            top_k_curve,
            ..
        } => classify_command(&cfg, cohort, checkpoint, top_k_curve, &out).map(drop),
        Command::Saliency {
            checkpoint,
            image,
            index,
        } => saliency_command(&cfg, checkpoint, image, *index, &out),
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
