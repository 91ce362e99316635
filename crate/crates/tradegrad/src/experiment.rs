//! Config-driven experiments: bars in, per-run CSVs and JSON reports out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Utc};
use rayon::prelude::*;
use serde_json::{json, Map, Number, Value};
use tradegrad_core::backtest::{run_single, split_env, BacktestError, MetricsReport, RunResult, TestStep};
use tradegrad_core::market_data::{sample_stream, Bar, Trade};
use tradegrad_core::rng::{run_seed, RUN_SEED_RULE};

use crate::config::{ConfigError, ExperimentConfig};
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::ticks::{format_timestamp, load_ticks, IngestError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Ingest { path: PathBuf, source: IngestError },
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error("config names no data source; set `data` or `synthetic`")]
    NoData,
    #[error("only {bars} bars sampled; every split needs more than n + 1 = {need}")]
    TooFewBars { bars: usize, need: usize },
    #[error("run {run} (seed {seed}): {source}")]
    Run { run: u32, seed: u64, source: BacktestError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

pub fn read_text(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    crate::config::parse_config(&read_text(path)?)
        .map_err(|source| ExperimentError::Config { path: path.to_path_buf(), source })
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec, ExperimentError> {
    SyntheticSpec::parse(&read_text(path)?)
        .map_err(|source| ExperimentError::Config { path: path.to_path_buf(), source })
}

/// Trades named by the config. Relative paths resolve against `base`, the
/// directory holding the config file.
pub fn load_trades(cfg: &ExperimentConfig, base: &Path) -> Result<Vec<Trade>, ExperimentError> {
    if let Some(data) = &cfg.data {
        let path = base.join(data);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        load_ticks(std::io::BufReader::new(file)).map_err(|source| ExperimentError::Ingest { path, source })
    } else if let Some(spec) = &cfg.synthetic {
        let spec = load_spec(&base.join(spec))?;
        Ok(generate_synthetic(&spec, spec.seed))
    } else {
        Err(ExperimentError::NoData)
    }
}

/// Checks that every split is long enough to produce at least one decision.
pub fn check_bars(cfg: &ExperimentConfig, bars: &[Bar]) -> Result<(), ExperimentError> {
    let bt = cfg.backtest();
    let too_few = ExperimentError::TooFewBars { bars: bars.len(), need: cfg.n + 1 };
    for range in bt.split.ranges(bars.len()) {
        if range.is_empty() || split_env(bars, &range, bt.env).is_err() {
            return Err(too_few);
        }
    }
    Ok(())
}

pub fn run_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.runs).map(|i| run_seed(cfg.seed, i)).collect()
}

/// Every run of the experiment, in run order. Runs execute in parallel and
/// share nothing but the bars.
pub fn run_experiment(cfg: &ExperimentConfig, bars: &[Bar]) -> Result<Vec<RunResult>, ExperimentError> {
    check_bars(cfg, bars)?;
    let bt = cfg.backtest();
    run_seeds(cfg)
        .into_par_iter()
        .enumerate()
        .map(|(i, seed)| {
            run_single(bars, &bt, seed).map_err(|source| ExperimentError::Run { run: i as u32, seed, source })
        })
        .collect()
}

/// Decimal text with at most 9 significant digits.
pub fn sig9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().expect("float text");
    format!("{rounded}")
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::Number(Number::from_str(&sig9(x)).expect("decimal number"))
    } else {
        Value::Null
    }
}

fn metrics_value(m: &MetricsReport) -> Map<String, Value> {
    let mut o = Map::new();
    o.insert("expected_return".into(), num(m.expected_return));
    o.insert("std_return".into(), num(m.std_return));
    o.insert("sharpe".into(), m.sharpe.map_or(Value::Null, num));
    o.insert("mdd".into(), num(m.mdd));
    o.insert("hit".into(), num(m.hit));
    o
}

pub fn metrics_json(cfg: &ExperimentConfig, runs: &[RunResult]) -> Value {
    let rows: Vec<Value> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut o = metrics_value(&r.metrics);
            o.insert("run".into(), json!(i));
            o.insert("seed".into(), json!(r.seed));
            o.insert("epochs".into(), json!(r.training.epochs));
            o.insert("best_epoch".into(), json!(r.training.best_epoch));
            o.insert("cumulative_log_return".into(), num(r.cumulative_log_return()));
            Value::Object(o)
        })
        .collect();
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.metrics).collect();
    let average = MetricsReport::average(&reports).map_or(Value::Null, |m| Value::Object(metrics_value(&m)));
    let baseline = runs.first().map_or(Value::Null, |r| {
        let mut o = metrics_value(&r.baseline);
        o.insert("cumulative_log_return".into(), num(r.baseline_cumulative_log_return()));
        Value::Object(o)
    });
    json!({
        "model": cfg.model_name(),
        "lambda_sigma": num(cfg.lambda_sigma),
        "bars_per_year": num(cfg.backtest().bars_per_year),
        "runs": rows,
        "average": average,
        "baseline": baseline,
    })
}

pub fn manifest_json(cfg: &ExperimentConfig, bars: usize) -> Value {
    json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "model": cfg.model_name(),
        "config": cfg.echo(),
        "master_seed": cfg.seed,
        "run_seed_rule": RUN_SEED_RULE,
        "run_seeds": run_seeds(cfg),
        "bars": bars,
    })
}

fn timestamp_of(bars: &[Bar], steps: &[TestStep]) -> Option<i64> {
    steps.first().map(|s| bars[s.bar_index - 1].end_ts)
}

pub fn equity_csv(bars: &[Bar], steps: &[TestStep], curve: &[f64]) -> String {
    let mut s = String::from("timestamp,equity\n");
    let times = timestamp_of(bars, steps).into_iter().chain(steps.iter().map(|st| st.timestamp));
    for (ts, v) in times.zip(curve) {
        let _ = writeln!(s, "{},{}", format_timestamp(ts), sig9(*v));
    }
    s
}

pub fn actions_csv(steps: &[TestStep]) -> String {
    let mut s = String::from("timestamp,action\n");
    for st in steps {
        let _ = writeln!(s, "{},{}", format_timestamp(st.timestamp), sig9(st.action));
    }
    s
}

/// Log return per calendar month (UTC) of the bars the returns were earned on.
pub fn monthly_log_returns(steps: &[TestStep]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for st in steps {
        let dt = DateTime::<Utc>::from_timestamp_micros(st.timestamp).expect("timestamp in range");
        let key = format!("{:04}-{:02}", dt.year(), dt.month());
        let lr = st.linear_return.ln_1p();
        match out.last_mut() {
            Some((k, v)) if *k == key => *v += lr,
            _ => out.push((key, lr)),
        }
    }
    out
}

pub fn monthly_csv(steps: &[TestStep]) -> String {
    let mut s = String::from("month,log_return\n");
    for (m, v) in monthly_log_returns(steps) {
        let _ = writeln!(s, "{m},{}", sig9(v));
    }
    s
}

fn write(path: PathBuf, text: &str) -> Result<(), ExperimentError> {
    fs::write(&path, text).map_err(io_err(&path))
}

/// Writes the per-run CSVs under `out/run_NN/`, the baseline curve, and the
/// experiment-level `metrics.json` and `manifest.json`.
pub fn write_outputs(
    out: &Path,
    cfg: &ExperimentConfig,
    bars: &[Bar],
    runs: &[RunResult],
) -> Result<(), ExperimentError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    runs.par_iter().enumerate().try_for_each(|(i, r)| {
        let dir = out.join(format!("run_{i:02}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write(dir.join("equity_curve.csv"), &equity_csv(bars, &r.steps, &r.curve.values))?;
        write(dir.join("actions.csv"), &actions_csv(&r.steps))?;
        write(dir.join("monthly_log_returns.csv"), &monthly_csv(&r.steps))
    })?;
    if let Some(r) = runs.first() {
        write(out.join("baseline_equity_curve.csv"), &equity_csv(bars, &r.baseline_steps, &r.baseline_curve.values))?;
        write(out.join("baseline_monthly_log_returns.csv"), &monthly_csv(&r.baseline_steps))?;
    }
    let pretty = |v: &Value| serde_json::to_string_pretty(v).expect("json") + "\n";
    write(out.join("metrics.json"), &pretty(&metrics_json(cfg, runs)))?;
    write(out.join("manifest.json"), &pretty(&manifest_json(cfg, bars.len())))
}

/// Everything `run` does: load, sample, train and test every run, write.
pub fn execute(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<Vec<RunResult>, ExperimentError> {
    let trades = load_trades(cfg, base)?;
    let bars = sample_stream(&trades, &cfg.sampler());
    let runs = run_experiment(cfg, &bars)?;
    write_outputs(out, cfg, &bars, &runs)?;
    Ok(runs)
}
