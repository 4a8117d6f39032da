//! Batch command-line surface for the segforge pipeline.
//!
//! `segforge <phantom|histogram|preprocess|augment|train|predict|evaluate|compare>`.
//! Every command accepts `--config <path>` and `--seed <n>`; the
//! `SEGFORGE_THREADS` environment variable caps worker threads. Exit codes
//! are 0 on success, 1 on runtime or data errors and 2 on usage errors.

pub mod commands;
pub mod config;
pub mod io;
pub mod render;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::*;
use config::RunConfig;

pub const THREADS_ENV: &str = "SEGFORGE_THREADS";

/// A problem with flags, configuration or environment; exits with code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Parser, Debug)]
#[command(name = "segforge", version, about = "CT infection segmentation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic CT volumes with infection masks.
    Phantom(PhantomArgs),
    /// Hounsfield-unit histogram of a volume.
    Histogram(HistogramArgs),
    /// Clip, resize, normalize and binarize into per-slice files.
    Preprocess(PreprocessArgs),
    /// Grow a slice set to a target size with seeded augmentation.
    Augment(AugmentArgs),
    /// Train a model; writes a checkpoint, history and curves.
    Train(TrainArgs),
    /// Probability maps and post-processed masks for each slice.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Side-by-side table of two evaluation reports.
    Compare(CompareArgs),
}

fn threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(UsageError(format!("{THREADS_ENV} must be a positive integer, got `{v}`")).into()),
        },
        Err(_) => Ok(None),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.common.load()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, &cfg),
        Command::Histogram(a) => cmd_histogram(a, &cfg),
        Command::Preprocess(a) => cmd_preprocess(a, &cfg),
        Command::Augment(a) => cmd_augment(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Predict(a) => cmd_predict(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg),
        Command::Compare(a) => cmd_compare(a, &cfg),
    })
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 }
        }
    }
}
