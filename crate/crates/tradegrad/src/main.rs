use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tradegrad::experiment::{self, ExperimentError};
use tradegrad::synth::generate_synthetic;
use tradegrad::ticks::write_ticks;
use tradegrad_core::market_data::sample_stream;

#[derive(Parser)]
#[command(version, about = "Deep policy-gradient trading experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and backtest every run of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Master seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate config and data, then stop before training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write a synthetic tick CSV.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(
    config: &Path,
    seed: Option<u64>,
    runs: Option<u32>,
    out: Option<PathBuf>,
    dry_run: bool,
) -> Result<(), ExperimentError> {
    let mut cfg = experiment::load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    if let Some(o) = &out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    cfg.validate().map_err(|source| ExperimentError::Config { path: config.to_path_buf(), source })?;
    let base = config.parent().unwrap_or(Path::new("."));
    let out = out.unwrap_or_else(|| base.join(&cfg.out));

    let trades = experiment::load_trades(&cfg, base)?;
    let bars = sample_stream(&trades, &cfg.sampler());
    experiment::check_bars(&cfg, &bars)?;
    let split = cfg.backtest().split.ranges(bars.len());
    eprintln!(
        "{}: {} trades, {} bars (train {}, validation {}, test {}), {} runs",
        cfg.model_name(),
        trades.len(),
        bars.len(),
        split[0].len(),
        split[1].len(),
        split[2].len(),
        cfg.runs
    );
    if dry_run {
        eprintln!("dry run: config and data are valid");
        return Ok(());
    }
    let results = experiment::run_experiment(&cfg, &bars)?;
    experiment::write_outputs(&out, &cfg, &bars, &results)?;
    for (i, r) in results.iter().enumerate() {
        eprintln!(
            "run {i:02}: epochs {:3}  log return {:+.4}  (buy and hold {:+.4})",
            r.training.epochs,
            r.cumulative_log_return(),
            r.baseline_cumulative_log_return()
        );
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn synth(spec: &Path, out: &Path, seed: Option<u64>) -> Result<(), ExperimentError> {
    let spec = experiment::load_spec(spec)?;
    let trades = generate_synthetic(&spec, seed.unwrap_or(spec.seed));
    let io = |source| ExperimentError::Io { path: out.to_path_buf(), source };
    let file = fs::File::create(out).map_err(io)?;
    write_ticks(std::io::BufWriter::new(file), &trades).map_err(|e| io(e.into()))?;
    eprintln!("wrote {} ticks to {}", trades.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Run { config, seed, runs, out, dry_run } => run(&config, seed, runs, out, dry_run),
        Command::Synth { spec, out, seed } => synth(&spec, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
