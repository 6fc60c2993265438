//! `segprice`: segment customers, fit group demand models, price and
//! benchmark, with JSON artifacts handed between stages.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "segprice", version, about = "Customer segmentation and segment-specific dynamic pricing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `paths.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ignore unknown CSV columns.
    #[arg(long)]
    lax: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sub-cluster each tariff group and merge into final groups.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        g_final: Option<usize>,
        /// Previous period's segmentation artifact.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Fit one demand model per final group.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Segmentation artifact; defaults to `<out>/segmentation.json`.
        #[arg(long)]
        segmentation: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Optimize per-group prices, and uniform prices for comparison.
    Price {
        #[command(flatten)]
        common: Common,
        /// Models artifact; defaults to `<out>/models.json`.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        flat_price: Option<f64>,
        #[arg(long)]
        revenue_cap: Option<f64>,
        /// Solve only the uniform tariff.
        #[arg(long)]
        uniform_only: bool,
    },
    /// Compare per-group and uniform pricing over simulated cost draws.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        flat_price: Option<f64>,
        #[arg(long)]
        revenue_cap: Option<f64>,
    },
    /// Write a synthetic population with readings, tariffs and a config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n_per_type: usize,
        #[arg(long, default_value_t = 62)]
        days: usize,
        /// Comma-separated tariff group names.
        #[arg(long, default_value = "TA,TB,TC,TD", value_delimiter = ',')]
        tariff_groups: Vec<String>,
        /// Drop the consumption noise.
        #[arg(long)]
        noiseless: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Segment { common, g_final, prior } => commands::segment(&common.into(), g_final, prior.as_deref()),
        Command::Fit { common, segmentation, lambda } => commands::fit(&common.into(), segmentation.as_deref(), lambda),
        Command::Price { common, models, flat_price, revenue_cap, uniform_only } => {
            commands::price(&common.into(), models.as_deref(), flat_price, revenue_cap, uniform_only)
        }
        Command::Benchmark { common, models, runs, flat_price, revenue_cap } => {
            commands::benchmark(&common.into(), models.as_deref(), runs, flat_price, revenue_cap)
        }
        Command::Synth { out, seed, n_per_type, days, tariff_groups, noiseless } => {
            commands::synth(&out, seed, n_per_type, days, &tariff_groups, noiseless)
        }
    };
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl From<Common> for commands::Invocation {
    fn from(c: Common) -> Self {
        commands::Invocation { config: c.config, seed: c.seed, out: c.out, lax: c.lax }
    }
}
