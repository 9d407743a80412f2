use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use multijm::dataset::HierarchyMode;

fn existing(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.exists() {
        Ok(p)
    } else {
        Err(format!("`{s}` does not exist"))
    }
}

fn mode(s: &str) -> Result<HierarchyMode, String> {
    HierarchyMode::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "multijm", version, about = "Bayesian joint models for multilevel longitudinal and time-to-event data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a cohort from a design file.
    Simulate(SimulateArgs),
    /// Fit a joint model by NUTS.
    Fit(FitArgs),
    /// Conditional survival predictions from a fit.
    Predict(PredictArgs),
    /// Time-dependent AUC of one or more fits.
    Auc(AucArgs),
    /// Posterior summary and diagnostics of a fit.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation design (JSON).
    #[arg(long, value_parser = existing)]
    pub design: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Associations, comma separated: `value`, `slope`, or `none`.
    #[arg(long)]
    pub assoc: Option<String>,
    /// Cluster summary applied to every association: sum, average, max or min.
    #[arg(long)]
    pub summary: Option<String>,
    /// Hierarchy: below, none or above.
    #[arg(long, value_parser = mode)]
    pub mode: Option<HierarchyMode>,
    /// Shared frailty per group (above mode).
    #[arg(long)]
    pub frailty: bool,
    /// Associate the hazard with the group random intercept (above mode).
    #[arg(long)]
    pub shared_re: bool,
}

#[derive(Debug, Args)]
pub struct ChainArgs {
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_parser = existing)]
    pub long: PathBuf,
    #[arg(long, value_parser = existing)]
    pub event: PathBuf,
    /// Model specification (JSON).
    #[arg(long, value_parser = existing)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Data to predict for; defaults to the data the model was fitted to.
    #[arg(long, value_parser = existing)]
    pub long: Option<PathBuf>,
    #[arg(long, value_parser = existing)]
    pub event: Option<PathBuf>,
    #[arg(long)]
    pub landmark: f64,
    /// Absolute horizon time, after the landmark.
    #[arg(long)]
    pub horizon: f64,
    /// Use at most this many posterior draws.
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `fit`.
    #[arg(long, value_parser = existing)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct AucArgs {
    /// Fit directories; more than one produces a comparison table.
    #[arg(long, value_parser = existing, required = true)]
    pub fit: Vec<PathBuf>,
    /// Row labels for the comparison, one per fit.
    #[arg(long)]
    pub label: Vec<String>,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long, value_parser = existing)]
    pub fit: PathBuf,
    /// Write summary.csv here instead of only printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
