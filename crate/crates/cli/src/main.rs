//! `rollscale`: synthesize data, run rollouts, derive error growth, fit
//! scaling frontiers and check report bundles.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::FileConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "rollscale",
    version,
    about = "Rollout evaluation and compute-optimal scaling fits"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Check decomposed forward passes against the sequential model.
    #[arg(long, global = true)]
    pub verify: bool,
    /// Simulated parallel layout `dp,sp1,sp2,tp`.
    #[arg(long, global = true)]
    pub layout: Option<String>,
    #[arg(long, global = true)]
    pub dp: Option<usize>,
    #[arg(long, global = true)]
    pub sp1: Option<usize>,
    #[arg(long, global = true)]
    pub sp2: Option<usize>,
    #[arg(long, global = true)]
    pub tp: Option<usize>,
    /// How shifted windows cross rank boundaries: `halo` or `roll`.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic IsoFLOP family or a synthetic truth archive.
    Synth(SynthArgs),
    /// Roll a model out against truth and write per-lead metrics.
    Rollout(RolloutArgs),
    /// Average metrics over ICs and compute error growth per channel.
    Derive(DeriveArgs),
    /// Two-stage scaling fits over leads and channels.
    Fit(FitArgs),
    /// Verify a bundle's figure pairs and checksums and print a summary.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `isoflop` (runs.csv + metrics.csv) or `truth` (field archive).
    #[arg(long)]
    pub kind: Option<String>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Model description (JSON or TOML).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of truth field files.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub ic_stride_hours: Option<u32>,
    #[arg(long)]
    pub max_lead_hours: Option<u32>,
    /// Fail on the first diverged IC instead of recording it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Moving-average window applied to the derivative.
    #[arg(long)]
    pub smooth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Any of `params,data,compute`.
    #[arg(long, value_delimiter = ',')]
    pub covariate: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub leads: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<String>>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Lead whose stage-1 optima feed the allocation fit.
    #[arg(long)]
    pub alloc_lead: Option<u32>,
    #[arg(long)]
    pub alloc_channel: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Bundle directory (defaults to `--out`).
    #[arg(long)]
    pub bundle: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = commands::Context::new(&cli.global, file)?;
    match cli.command {
        Command::Synth(a) => commands::synth::run(&ctx, &a),
        Command::Rollout(a) => commands::rollout::run(&ctx, &a),
        Command::Derive(a) => commands::analysis::derive(&ctx, &a),
        Command::Fit(a) => commands::analysis::fit(&ctx, &a),
        Command::Report(a) => commands::analysis::report(&ctx, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(error::exit::OK),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_work_after_the_subcommand() {
        let cli = Cli::try_parse_from([
            "rollscale",
            "fit",
            "--out",
            "x",
            "--covariate",
            "params,data",
            "--force",
        ])
        .unwrap();
        assert!(cli.global.force);
        let Command::Fit(f) = cli.command else {
            panic!()
        };
        assert_eq!(f.covariate.unwrap(), ["params", "data"]);
    }
}
