//! Walk-forward backtesting: chronological splits, early-stopped training,
//! an online-refitting test pass and the performance metrics.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use thiserror::Error;

use crate::agents::{Agent, AgentConfig, AgentError, EpisodeLog, Phase, TradingAgent};
use crate::env::{EnvConfig, EnvError, TradingEnv};
use crate::market_data::Bar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BacktestError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid backtest setup: {0}")]
    Config(alloc::string::String),
}

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_frac: 0.25, val_frac: 0.25, test_frac: 0.5 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) || libm::fabs(fr.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(BacktestError::Config(format!("split fractions {fr:?} must be positive and sum to 1")));
        }
        Ok(())
    }

    /// Bar ranges of the three splits.
    pub fn ranges(&self, len: usize) -> [Range<usize>; 3] {
        let a = libm::round(len as f64 * self.train_frac) as usize;
        let b = libm::round(len as f64 * (self.train_frac + self.val_frac)) as usize;
        [0..a, a..b, b..len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopConfig {
    pub check_every: usize,
    pub max_epochs: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { check_every: 10, max_epochs: 100 }
    }
}

/// Annualized performance of one return series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub expected_return: f64,
    pub std_return: f64,
    /// Absent when the standard deviation is zero.
    pub sharpe: Option<f64>,
    pub mdd: f64,
    pub hit: f64,
}

/// Equity over time, starting at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EquityCurve {
    pub values: Vec<f64>,
    /// Set when a step lost everything; the curve ends at 0 there.
    pub bankrupt: bool,
}

impl EquityCurve {
    pub fn from_returns(returns: &[f64]) -> Self {
        let mut values = Vec::with_capacity(returns.len() + 1);
        values.push(1.0);
        let mut v = 1.0;
        for &r in returns {
            if 1.0 + r <= 0.0 {
                values.push(0.0);
                return Self { values, bankrupt: true };
            }
            v *= 1.0 + r;
            values.push(v);
        }
        Self { values, bankrupt: false }
    }

    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("curve starts at 1")
    }

    /// `R_T = Π(1 + ρ) − 1`.
    pub fn total_return(&self) -> f64 {
        self.final_value() - 1.0
    }
}

/// `ρ = y·a − λc·|a − a′|`, the simple return of holding `a` after
/// rebalancing to it from the drifted weight `a′`.
pub fn linear_step_return(y: f64, a: f64, a_drift: f64, lambda_c: f64) -> f64 {
    y * a - lambda_c * libm::fabs(a - a_drift)
}

pub fn annualize(per_bar_mean: f64, per_bar_std: f64, bars_per_year: f64) -> (f64, f64) {
    assert!(bars_per_year > 0.0);
    (per_bar_mean * bars_per_year, per_bar_std * libm::sqrt(bars_per_year))
}

pub fn sharpe(expected: f64, std: f64) -> Option<f64> {
    (std > 0.0).then(|| expected / std)
}

pub fn max_drawdown(curve: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut mdd: f64 = 0.0;
    for &v in curve {
        peak = peak.max(v);
        if peak > 0.0 {
            mdd = mdd.max((peak - v) / peak);
        }
    }
    mdd
}

pub fn hit_rate(returns: &[f64]) -> f64 {
    if returns.is_empty() {
        return 0.0;
    }
    returns.iter().filter(|&&r| r > 0.0).count() as f64 / returns.len() as f64
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, libm::sqrt(v))
}

impl MetricsReport {
    pub fn from_returns(returns: &[f64], bars_per_year: f64) -> Self {
        let (m, s) = mean_std(returns);
        let (e, sd) = annualize(m, s, bars_per_year);
        let curve = EquityCurve::from_returns(returns);
        Self {
            expected_return: e,
            std_return: sd,
            sharpe: sharpe(e, sd),
            mdd: max_drawdown(&curve.values),
            hit: hit_rate(returns),
        }
    }

    /// Arithmetic mean of each metric; the Sharpe mean is over runs where it
    /// is defined.
    pub fn average(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let sharpes: Vec<f64> = reports.iter().filter_map(|r| r.sharpe).collect();
        Some(MetricsReport {
            expected_return: avg(|r| r.expected_return),
            std_return: avg(|r| r.std_return),
            sharpe: (!sharpes.is_empty()).then(|| sharpes.iter().sum::<f64>() / sharpes.len() as f64),
            mdd: avg(|r| r.mdd),
            hit: avg(|r| r.hit),
        })
    }
}

/// Everything one walk-forward run needs besides the bars and the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacktestConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub split: SplitSpec,
    pub early_stop: EarlyStopConfig,
    pub bars_per_year: f64,
}

impl BacktestConfig {
    pub fn new(env: EnvConfig, agent: AgentConfig) -> Self {
        Self {
            env,
            agent,
            split: SplitSpec::default(),
            early_stop: EarlyStopConfig::default(),
            bars_per_year: 252.0 * 5.0,
        }
    }
}

/// Environment whose rewards cover exactly the bars of `range`.
pub fn split_env<'a>(bars: &'a [Bar], range: &Range<usize>, cfg: EnvConfig) -> Result<TradingEnv<'a>, EnvError> {
    let t0 = range.start.saturating_sub(1).max(cfg.n + 1);
    TradingEnv::starting_at(&bars[..range.end], cfg, t0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSummary {
    pub epochs: usize,
    /// `(epoch, validation reward)` of every check.
    pub checks: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
}

/// Cumulative reward of a greedy pass, leaving `agent` untouched.
pub fn validation_score<A: TradingAgent + Clone>(agent: &A, env: &mut TradingEnv<'_>) -> Result<f64, BacktestError> {
    let mut probe = agent.clone();
    Ok(probe.run_episode(env, Phase::Evaluate)?.total_reward())
}

/// Trains on `train` and checks the validation reward every
/// `check_every` epochs. Stops at the first check that does not strictly
/// improve and restores the agent from the best check.
pub fn train_with_early_stopping<A: TradingAgent + Clone>(
    agent: &mut A,
    bars: &[Bar],
    train: &Range<usize>,
    val: &Range<usize>,
    env_cfg: EnvConfig,
    cfg: &EarlyStopConfig,
) -> Result<TrainingSummary, BacktestError> {
    let mut best: Option<(f64, usize, A)> = None;
    let mut summary = TrainingSummary { epochs: 0, checks: Vec::new(), best_epoch: None };
    for epoch in 1..=cfg.max_epochs {
        let mut env = split_env(bars, train, env_cfg)?;
        agent.run_episode(&mut env, Phase::Train)?;
        summary.epochs = epoch;
        if cfg.check_every > 0 && epoch % cfg.check_every == 0 {
            let score = validation_score(agent, &mut split_env(bars, val, env_cfg)?)?;
            summary.checks.push((epoch, score));
            match &best {
                Some((b, _, _)) if score <= *b => break,
                _ => best = Some((score, epoch, agent.clone())),
            }
        }
    }
    if let Some((_, epoch, snapshot)) = best {
        *agent = snapshot;
        summary.best_epoch = Some(epoch);
    }
    Ok(summary)
}

/// One logged test step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestStep {
    pub bar_index: usize,
    pub timestamp: i64,
    pub action: f64,
    pub linear_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub training: TrainingSummary,
    pub steps: Vec<TestStep>,
    pub metrics: MetricsReport,
    pub curve: EquityCurve,
    pub baseline_steps: Vec<TestStep>,
    pub baseline: MetricsReport,
    pub baseline_curve: EquityCurve,
}

impl RunResult {
    pub fn returns(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.linear_return).collect()
    }

    /// `Σ log(1 + ρ)` over the test split.
    pub fn cumulative_log_return(&self) -> f64 {
        libm::log(self.curve.final_value())
    }

    pub fn baseline_cumulative_log_return(&self) -> f64 {
        libm::log(self.baseline_curve.final_value())
    }
}

fn test_steps(bars: &[Bar], log: &EpisodeLog) -> Vec<TestStep> {
    log.steps
        .iter()
        .map(|s| TestStep {
            bar_index: s.bar_index,
            timestamp: bars[s.bar_index].end_ts,
            action: s.action,
            linear_return: s.linear_return,
        })
        .collect()
}

/// Buy-and-hold over `range`, through the same environment and accounting.
pub fn buy_and_hold_baseline(
    bars: &[Bar],
    range: &Range<usize>,
    env_cfg: EnvConfig,
    bars_per_year: f64,
) -> Result<(MetricsReport, EquityCurve, Vec<TestStep>), BacktestError> {
    let mut env = split_env(bars, range, env_cfg)?;
    let mut steps = Vec::new();
    while !env.done() {
        let out = env.step(1.0)?;
        steps.push(TestStep {
            bar_index: out.bar_index,
            timestamp: bars[out.bar_index].end_ts,
            action: 1.0,
            linear_return: out.linear_return,
        });
    }
    let returns: Vec<f64> = steps.iter().map(|s| s.linear_return).collect();
    Ok((MetricsReport::from_returns(&returns, bars_per_year), EquityCurve::from_returns(&returns), steps))
}

/// Trains with early stopping, then walks forward through the test split
/// letting the agent keep refitting.
pub fn walk_forward<A: TradingAgent + Clone>(
    agent: &mut A,
    bars: &[Bar],
    cfg: &BacktestConfig,
) -> Result<(TrainingSummary, Vec<TestStep>), BacktestError> {
    cfg.split.validate()?;
    let [train, val, test] = cfg.split.ranges(bars.len());
    let need = cfg.env.n + 3;
    if train.len() < need || val.is_empty() || test.is_empty() {
        return Err(BacktestError::Config(format!(
            "{} bars are too few: the training split needs at least {} bars",
            bars.len(),
            need
        )));
    }
    let training = train_with_early_stopping(agent, bars, &train, &val, cfg.env, &cfg.early_stop)?;
    let mut env = split_env(bars, &test, cfg.env)?;
    let log = agent.run_episode(&mut env, Phase::OnlineTest)?;
    Ok((training, test_steps(bars, &log)))
}

/// One complete run for `seed`: fresh agent, walk-forward, metrics and the
/// baseline on the same test split.
pub fn run_single(bars: &[Bar], cfg: &BacktestConfig, seed: u64) -> Result<RunResult, BacktestError> {
    let mut agent = Agent::new(cfg.agent, seed)?;
    let (training, steps) = walk_forward(&mut agent, bars, cfg)?;
    let returns: Vec<f64> = steps.iter().map(|s| s.linear_return).collect();
    let [_, _, test] = cfg.split.ranges(bars.len());
    let (baseline, baseline_curve, baseline_steps) = buy_and_hold_baseline(bars, &test, cfg.env, cfg.bars_per_year)?;
    Ok(RunResult {
        seed,
        training,
        metrics: MetricsReport::from_returns(&returns, cfg.bars_per_year),
        curve: EquityCurve::from_returns(&returns),
        steps,
        baseline,
        baseline_curve,
        baseline_steps,
    })
}
