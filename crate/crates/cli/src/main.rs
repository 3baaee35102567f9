//! `fednew-lab`: run federated optimization experiments from a TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fednew_core::config::ExperimentConfig;
use fednew_core::harness::{self, RunOptions};
use fednew_core::{synth, Error, Result};

#[derive(Parser)]
#[command(name = "fednew-lab", version, about = "Federated Newton-type optimization workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every algorithm in the config; writes one CSV per algorithm plus summary.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for algorithm blocks that do not set their own.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute (or load from cache) the reference optimum and print it.
    Fstar {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rounds and bits needed to reach a target gap, from existing CSVs.
    Summarize {
        #[arg(long)]
        glob: String,
        #[arg(long, default_value_t = 1e-4)]
        target: f64,
    },
    /// Write a synthetic LibSVM file shaped like a benchmark set.
    Synth {
        #[arg(long)]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    let threads = harness::threads_from_env();
    match cmd {
        Cmd::Run { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                out_dir: Some(out.unwrap_or_else(|| cfg.resolve(&cfg.output.dir))),
                seed,
                write_files: true,
            };
            let report = harness::with_threads(threads, || harness::run(&cfg, &opts))??;
            print!("{}", harness::render_summary(&report.summary));
            let clamps = report.clamp_warnings();
            if clamps > 0 {
                log::warn!("{clamps} negative gaps were clamped to 0");
            }
            Ok(())
        }
        Cmd::Fstar { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out_dir = out.unwrap_or_else(|| cfg.resolve(&cfg.output.dir));
            let fstar = harness::with_threads(threads, || -> Result<_> {
                let data = harness::load_data(&cfg)?;
                let cache = harness::fstar_cache_path(&cfg, &out_dir, &data);
                let f = harness::fstar_cached(&data, &cache)?;
                Ok((f, cache))
            })??;
            println!("dataset_hash={}", fstar.0.dataset_hash);
            println!("mu={:e}", fstar.0.mu);
            println!("f_star={:e}", fstar.0.f_star);
            println!("grad_norm={:e}", fstar.0.grad_norm);
            println!("cache={}", fstar.1.display());
            Ok(())
        }
        Cmd::Summarize { glob, target } => {
            let mut paths: Vec<PathBuf> = glob::glob(&glob)
                .map_err(|e| Error::InvalidArgument(format!("bad glob: {e}")))?
                .filter_map(|p| p.ok())
                .filter(|p| p.file_name().is_none_or(|n| n != "summary.csv"))
                .filter(|p| !p.to_string_lossy().ends_with(".messages.csv"))
                .collect();
            paths.sort();
            let rows = harness::summarize_files(&paths, &[target])?;
            print!("{}", harness::render_summary(&rows));
            Ok(())
        }
        Cmd::Synth { profile, seed, out } => {
            let p = synth::profile(&profile)?;
            harness::write_atomic(&out, synth::generate(&p, seed).as_bytes())
        }
    }
}
