//! The trading MDP: normalized price states, position drift and the
//! cost- and risk-adjusted reward.
//!
//! Bars are indexed `0..T`. The observation of bar `t` uses its own OHLC and
//! closes strictly before `t`. The first decision is taken after bar `n + 1`
//! so that `n` observations exist; each [`TradingEnv::step`] consumes the next
//! bar and returns the reward of holding the chosen weight over it. At the
//! last bar the position is liquidated and that cost is charged to the final
//! reward.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::market_data::Bar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("need {need} observations, have {have}")]
    NotReady { need: usize, have: usize },
    #[error("episode already finished")]
    Finished,
    #[error("invalid parameter: {0}")]
    Config(String),
}

fn domain(msg: String) -> EnvError {
    EnvError::Domain(msg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    pub lambda_c: f64,
    pub lambda_sigma: f64,
    /// Variance lookback `L` in bars.
    pub lookback: usize,
    /// Discount rate; the environment is immediate-reward so this is 0.
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { lambda_c: 0.0002, lambda_sigma: 0.0, lookback: 60, gamma: 0.0 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return Err(EnvError::Config(format!("lambda_c {} not in [0, 1]", self.lambda_c)));
        }
        if !(self.lambda_sigma >= 0.0 && self.lambda_sigma.is_finite()) {
            return Err(EnvError::Config(format!("lambda_sigma {} must be >= 0", self.lambda_sigma)));
        }
        if self.lookback < 2 {
            return Err(EnvError::Config(format!("lookback {} < 2", self.lookback)));
        }
        if self.gamma != 0.0 {
            return Err(EnvError::Config(format!("gamma {} must be 0", self.gamma)));
        }
        Ok(())
    }
}

/// `p_t / p_prev − 1`.
pub fn multiplicative_return(p_t: f64, p_prev: f64) -> Result<f64, EnvError> {
    if !(p_t > 0.0 && p_prev > 0.0) {
        return Err(domain(format!("non-positive price ({p_t}, {p_prev})")));
    }
    Ok(p_t / p_prev - 1.0)
}

/// Weight after the price move `y`, before rebalancing.
pub fn drift_weight(a_prev: f64, y: f64) -> Result<f64, EnvError> {
    let denom = a_prev * y + 1.0;
    if denom == 0.0 || !denom.is_finite() {
        return Err(domain(format!("portfolio wiped out (a = {a_prev}, y = {y})")));
    }
    Ok(a_prev * (1.0 + y) / denom)
}

/// `log(1 + y)·a_prev`.
pub fn gross_return(y: f64, a_prev: f64) -> Result<f64, EnvError> {
    if 1.0 + y <= 0.0 {
        return Err(domain(format!("1 + y = {} is not positive", 1.0 + y)));
    }
    Ok(libm::log1p(y) * a_prev)
}

pub fn net_return(r_gross: f64, a_chosen: f64, a_drift: f64, lambda_c: f64) -> f64 {
    r_gross - lambda_c * libm::fabs(a_chosen - a_drift)
}

pub(crate) fn population_variance<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let it = values.into_iter();
    let n = it.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = it.clone().sum::<f64>() / n as f64;
    it.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// Position weights and the window of recent net returns.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLedger {
    pub a_prev: f64,
    pub a_drift: f64,
    history: VecDeque<f64>,
    capacity: usize,
}

impl PositionLedger {
    pub fn new(lookback: usize) -> Self {
        Self { a_prev: 0.0, a_drift: 0.0, history: VecDeque::with_capacity(lookback), capacity: lookback }
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + Clone + '_ {
        self.history.iter().copied()
    }

    fn push(&mut self, r_net: f64) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(r_net);
    }
}

/// Appends `r_net` to the ledger and returns `r_net − λσ·Var`, the variance
/// being over the window that includes `r_net`.
pub fn risk_adjusted_reward(ledger: &mut PositionLedger, r_net: f64, lambda_sigma: f64) -> f64 {
    ledger.push(r_net);
    r_net - lambda_sigma * population_variance(ledger.history())
}

/// Normalized (close, high, low) of one bar, each in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizedObservation(pub [f64; 3]);

/// Normalizes `bar` against the previous closes (oldest first, the last being
/// `p_{t-1}`). The variance is over log returns of the last `lookback + 1`
/// closes; a zero variance yields the zero observation.
pub fn normalize_observation(bar: &Bar, closes: &[f64], lookback: usize) -> Result<NormalizedObservation, EnvError> {
    if closes.len() < 2 {
        return Err(EnvError::NotReady { need: 2, have: closes.len() });
    }
    if closes.iter().any(|&c| c <= 0.0) || bar.low <= 0.0 {
        return Err(domain(String::from("non-positive price in normalizer")));
    }
    let from = closes.len().saturating_sub(lookback + 1);
    let window = &closes[from..];
    let var = population_variance(window.windows(2).map(|w| libm::log(w[1] / w[0])));
    if var == 0.0 {
        return Ok(NormalizedObservation::default());
    }
    let p_prev = closes[closes.len() - 1];
    let scale = var * libm::sqrt(lookback as f64);
    let f = |x: f64| (libm::log(x / p_prev) / scale).clamp(-1.0, 1.0);
    Ok(NormalizedObservation([f(bar.close), f(bar.high), f(bar.low)]))
}

/// `n` stacked observations (oldest first) and the previous action.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub window: Vec<NormalizedObservation>,
    pub prev_action: f64,
}

impl AgentState {
    pub fn n(&self) -> usize {
        self.window.len()
    }

    /// Channel-major `3 × n` values: closes, then highs, then lows.
    pub fn channels(&self) -> Vec<f64> {
        let n = self.window.len();
        let mut out = alloc::vec![0.0; 3 * n];
        for (t, o) in self.window.iter().enumerate() {
            for c in 0..3 {
                out[c * n + t] = o.0[c];
            }
        }
        out
    }
}

pub fn build_state(recent: &[NormalizedObservation], n: usize, prev_action: f64) -> Result<AgentState, EnvError> {
    if recent.len() < n {
        return Err(EnvError::NotReady { need: n, have: recent.len() });
    }
    Ok(AgentState { window: recent[recent.len() - n..].to_vec(), prev_action: prev_action.clamp(-1.0, 1.0) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    /// Observations per state.
    pub n: usize,
    pub reward: RewardParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { n: 20, reward: RewardParams::default() }
    }
}

/// Normalized observation of every bar; entries before index 2 are unused.
pub fn observations(bars: &[Bar], lookback: usize) -> Result<Vec<NormalizedObservation>, EnvError> {
    let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let mut out = Vec::with_capacity(bars.len());
    for (t, bar) in bars.iter().enumerate() {
        if t < 2 {
            out.push(NormalizedObservation::default());
        } else {
            out.push(normalize_observation(bar, &closes[..t], lookback)?);
        }
    }
    Ok(out)
}

/// Number of decisions an episode over `bars` bars takes with window `n`.
pub fn decision_count(bars: usize, n: usize) -> usize {
    bars.saturating_sub(n + 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Index of the bar the reward was earned over.
    pub bar_index: usize,
    pub action: f64,
    pub y: f64,
    pub gross: f64,
    pub net: f64,
    pub reward: f64,
    /// Simple return of the portfolio over the step, net of costs.
    pub linear_return: f64,
    pub cost: f64,
    pub done: bool,
    pub next_state: Option<AgentState>,
}

/// One pass over a bar sequence.
#[derive(Debug, Clone)]
pub struct TradingEnv<'a> {
    bars: &'a [Bar],
    obs: Vec<NormalizedObservation>,
    cfg: EnvConfig,
    t: usize,
    ledger: PositionLedger,
}

impl<'a> TradingEnv<'a> {
    pub fn new(bars: &'a [Bar], cfg: EnvConfig) -> Result<Self, EnvError> {
        Self::starting_at(bars, cfg, cfg.n + 1)
    }

    /// Like [`TradingEnv::new`] but the first decision is taken after bar
    /// `t0`; earlier bars only provide history. Requires `t0 > n`.
    pub fn starting_at(bars: &'a [Bar], cfg: EnvConfig, t0: usize) -> Result<Self, EnvError> {
        cfg.reward.validate()?;
        if cfg.n == 0 {
            return Err(EnvError::Config(String::from("n must be positive")));
        }
        if bars.len() < cfg.n + 3 {
            return Err(EnvError::NotReady { need: cfg.n + 3, have: bars.len() });
        }
        if t0 <= cfg.n || t0 + 1 >= bars.len() {
            return Err(EnvError::Config(format!(
                "first decision index {} outside ({}, {})",
                t0,
                cfg.n,
                bars.len() - 1
            )));
        }
        let obs = observations(bars, cfg.reward.lookback)?;
        Ok(Self { bars, obs, cfg, t: t0, ledger: PositionLedger::new(cfg.reward.lookback) })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn bars(&self) -> &'a [Bar] {
        self.bars
    }

    pub fn ledger(&self) -> &PositionLedger {
        &self.ledger
    }

    /// Index of the bar the next decision is taken after.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t + 1 >= self.bars.len()
    }

    pub fn state(&self) -> AgentState {
        let n = self.cfg.n;
        build_state(&self.obs[self.t + 1 - n..=self.t], n, self.ledger.a_prev).expect("window is always full")
    }

    /// Holds `action` over the next bar.
    pub fn step(&mut self, action: f64) -> Result<StepOutcome, EnvError> {
        if self.done() {
            return Err(EnvError::Finished);
        }
        if !(-1.0..=1.0).contains(&action) {
            return Err(domain(format!("action {action} outside [-1, 1]")));
        }
        let p = self.cfg.reward;
        let cost = p.lambda_c * libm::fabs(action - self.ledger.a_drift);
        let y = multiplicative_return(self.bars[self.t + 1].close, self.bars[self.t].close)?;
        let gross = gross_return(y, action)?;
        let drift = drift_weight(action, y)?;
        self.t += 1;
        let done = self.done();
        let exit_cost = if done { p.lambda_c * libm::fabs(drift) } else { 0.0 };
        let net = gross - cost - exit_cost;
        let reward = risk_adjusted_reward(&mut self.ledger, net, p.lambda_sigma);
        let linear_return = action * y - cost - exit_cost;
        self.ledger.a_prev = if done { 0.0 } else { action };
        self.ledger.a_drift = if done { 0.0 } else { drift };
        Ok(StepOutcome {
            bar_index: self.t,
            action,
            y,
            gross,
            net,
            reward,
            linear_return,
            cost: cost + exit_cost,
            done,
            next_state: if done { None } else { Some(self.state()) },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn close(a: f64, b: f64) -> bool {
        libm::fabs(a - b) <= 1e-12 * a.abs().max(b.abs()).max(1.0)
    }

    fn bar(c: f64, h: f64, l: f64) -> Bar {
        Bar { high: h, low: l, ..Bar::flat(c, 0) }
    }

    fn path(prices: &[f64]) -> Vec<Bar> {
        prices.iter().enumerate().map(|(i, &p)| Bar::flat(p, i as i64)).collect()
    }

    #[test]
    fn returns() {
        assert_eq!(multiplicative_return(100.0, 100.0).unwrap(), 0.0);
        assert!(close(multiplicative_return(102.0, 100.0).unwrap(), 0.02));
        assert!(close(multiplicative_return(95.0, 100.0).unwrap(), -0.05));
        assert!(multiplicative_return(0.0, 100.0).is_err());
    }

    #[test]
    fn drift() {
        assert_eq!(drift_weight(1.0, 0.37).unwrap(), 1.0);
        assert_eq!(drift_weight(0.0, -0.4).unwrap(), 0.0);
        assert!(close(drift_weight(0.5, 0.02).unwrap(), 0.51 / 1.01));
        assert!(drift_weight(1.0, -1.0).is_err());
    }

    #[test]
    fn gross_and_net() {
        assert_eq!(gross_return(0.02, 0.0).unwrap(), 0.0);
        assert!(close(gross_return(0.02, 1.0).unwrap(), libm::log(1.02)));
        assert!(close(gross_return(0.02, -1.0).unwrap(), -libm::log(1.02)));
        assert!(gross_return(-1.0, 1.0).is_err());
        assert_eq!(net_return(0.01, 0.3, 0.3, 0.5), 0.01);
        assert!(close(net_return(0.0, 1.0, 0.0, 0.0002), -0.0002));
        assert_eq!(net_return(0.013, 1.0, -1.0, 0.0), 0.013);
    }

    #[test]
    fn risk_term() {
        let mut l = PositionLedger::new(60);
        for r in [0.01, -0.01] {
            risk_adjusted_reward(&mut l, r, 0.1);
        }
        let r = risk_adjusted_reward(&mut l, 0.0, 0.1);
        assert!(libm::fabs(r - (-0.1 * (2.0 / 3.0) * 1e-4)) < 1e-15, "{r}");

        let mut l = PositionLedger::new(60);
        for _ in 0..5 {
            assert_eq!(risk_adjusted_reward(&mut l, 0.003, 0.7), 0.003);
        }
    }

    #[test]
    fn risk_window_is_bounded() {
        let mut l = PositionLedger::new(3);
        for r in [5.0, 1.0, 1.0, 1.0] {
            risk_adjusted_reward(&mut l, r, 1.0);
        }
        assert_eq!(l.history().collect::<Vec<_>>(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalizer_golden() {
        let closes = [100.0, 101.0, 99.0, 100.0];
        let o = normalize_observation(&bar(102.0, 103.0, 101.0), &closes, 60).unwrap();
        // σ² ≈ 2.0e-4, so raw values are about 12.8, 19.1 and 6.4.
        assert_eq!(o.0, [1.0, 1.0, 1.0]);

        let o = normalize_observation(&bar(100.001, 100.002, 99.999), &closes, 60).unwrap();
        let expect = [0.0064544558465153955, 0.012908847149297164, -0.006454520391396587];
        for (a, b) in o.0.iter().zip(expect) {
            assert!(libm::fabs(a - b) < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn normalizer_edge_cases() {
        let closes = [100.0, 101.0, 99.0, 100.0];
        let o = normalize_observation(&bar(100.0, 100.0, 100.0), &closes, 60).unwrap();
        assert_eq!(o.0, [0.0; 3]);
        let o = normalize_observation(&bar(50.0, 200.0, 50.0), &[10.0, 10.0, 10.0], 60).unwrap();
        assert_eq!(o.0, [0.0; 3]);
        assert!(normalize_observation(&bar(1.0, 1.0, 1.0), &[1.0], 60).is_err());
    }

    #[test]
    fn state_building() {
        let o = NormalizedObservation([0.1, 0.2, 0.3]);
        assert!(build_state(&[o; 3], 4, 0.0).is_err());
        let s = build_state(&[o; 20], 20, 0.0).unwrap();
        assert!(s.window.iter().all(|w| *w == o));
        assert_eq!(s.channels()[..2], [0.1, 0.1]);
        assert_eq!(s.channels()[20], 0.2);
    }

    #[test]
    fn flat_agent_earns_nothing() {
        let bars = path(&[100.0, 103.0, 97.0, 99.0, 110.0, 90.0, 95.0, 96.0]);
        let cfg = EnvConfig { n: 2, reward: RewardParams { lambda_sigma: 0.5, ..RewardParams::default() } };
        let mut env = TradingEnv::new(&bars, cfg).unwrap();
        while !env.done() {
            assert_eq!(env.step(0.0).unwrap().reward, 0.0);
        }
    }

    #[test]
    fn round_trip_costs_twice() {
        // Enter long on a flat bar, then exit at the end.
        let bars = path(&[100.0; 5]);
        let cfg = EnvConfig { n: 2, reward: RewardParams { lambda_c: 0.0002, ..RewardParams::default() } };
        let mut env = TradingEnv::new(&bars, cfg).unwrap();
        assert_eq!(env.t(), 3);
        let out = env.step(1.0).unwrap();
        assert!(out.done);
        assert!(close(out.reward, -0.0004));
    }

    #[test]
    fn state_tracks_previous_action() {
        let bars = path(&[100.0, 101.0, 102.0, 101.0, 100.0, 99.0, 100.0]);
        let mut env = TradingEnv::new(&bars, EnvConfig { n: 2, ..EnvConfig::default() }).unwrap();
        assert_eq!(env.state().prev_action, 0.0);
        let out = env.step(0.4).unwrap();
        assert_eq!(out.next_state.unwrap().prev_action, 0.4);
        assert!(env.step(1.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn prices() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-0.05f64..0.05, 6..60).prop_map(|ys| {
                let mut p = 100.0;
                let mut out = vec![p];
                for y in ys {
                    p *= 1.0 + y;
                    out.push(p);
                }
                out
            })
        }

        fn rewards(prices: &[f64], actions: &[f64], reward: RewardParams) -> Vec<StepOutcome> {
            let bars = path(prices);
            let mut env = TradingEnv::new(&bars, EnvConfig { n: 3, reward }).unwrap();
            let mut out = Vec::new();
            let mut i = 0;
            while !env.done() {
                out.push(env.step(actions[i % actions.len()]).unwrap());
                i += 1;
            }
            out
        }

        proptest! {
            #[test]
            fn frictionless_telescoping(ps in prices(), a in -1.0f64..1.0) {
                let out = rewards(&ps, &[a], RewardParams { lambda_c: 0.0, ..RewardParams::default() });
                let total: f64 = out.iter().map(|o| o.reward).sum();
                let entry = ps[ps.len() - 1 - out.len()];
                let expect = a * libm::log(ps[ps.len() - 1] / entry);
                prop_assert!((total - expect).abs() <= 1e-12 * out.len() as f64);
            }

            #[test]
            fn zero_position_zero_reward(ps in prices(), lc in 0.0f64..1.0, ls in 0.0f64..5.0) {
                let out = rewards(&ps, &[0.0], RewardParams { lambda_c: lc, lambda_sigma: ls, ..RewardParams::default() });
                prop_assert!(out.iter().all(|o| o.reward == 0.0));
            }

            #[test]
            fn cost_monotone(ps in prices(), acts in proptest::collection::vec(-1.0f64..1.0, 1..8), lc in 0.0f64..0.5, extra in 0.0f64..0.5) {
                let base = RewardParams { lambda_c: lc, ..RewardParams::default() };
                let more = RewardParams { lambda_c: lc + extra, ..base };
                for (a, b) in rewards(&ps, &acts, base).iter().zip(rewards(&ps, &acts, more).iter()) {
                    prop_assert!(b.reward <= a.reward);
                }
            }

            #[test]
            fn risk_monotone(hist in proptest::collection::vec(-0.1f64..0.1, 0..80), r in -0.1f64..0.1, ls in 0.0f64..2.0, extra in 0.0f64..2.0) {
                let mut a = PositionLedger::new(60);
                for &h in &hist {
                    risk_adjusted_reward(&mut a, h, 0.0);
                }
                let mut b = a.clone();
                prop_assert!(risk_adjusted_reward(&mut b, r, ls + extra) <= risk_adjusted_reward(&mut a, r, ls));
            }

            #[test]
            fn drift_fixed_points(y in -0.99f64..0.99) {
                prop_assert_eq!(drift_weight(1.0, y).unwrap(), 1.0);
                // A full short is not a fixed point: it shrinks after a rally.
                let short = drift_weight(-1.0, y).unwrap();
                prop_assert!((short - (-(1.0 + y) / (1.0 - y))).abs() <= 1e-12 * short.abs().max(1.0));
                prop_assert_eq!(drift_weight(0.0, y).unwrap(), 0.0);
            }

            #[test]
            fn observations_are_clipped(ps in prices()) {
                let bars: Vec<Bar> = ps.iter().map(|&p| bar(p, p * 1.01, p * 0.99)).collect();
                for o in observations(&bars, 60).unwrap() {
                    prop_assert!(o.0.iter().all(|v| (-1.0..=1.0).contains(v)));
                }
            }

            #[test]
            fn rewards_ignore_future_bars(ps in prices(), acts in proptest::collection::vec(-1.0f64..1.0, 1..8), cut in 0usize..60, bump in 0.5f64..2.0) {
                let full = rewards(&ps, &acts, RewardParams::default());
                let j = (cut % full.len()) + 4 + 1;
                let mut changed = ps.clone();
                for p in &mut changed[j..] {
                    *p *= bump;
                }
                let other = rewards(&changed, &acts, RewardParams::default());
                for (a, b) in full.iter().zip(&other) {
                    // The final step carries the liquidation cost, so it only
                    // matches when both runs end at the same index.
                    if a.bar_index < j && !a.done {
                        prop_assert_eq!(a.reward, b.reward);
                    }
                }
            }
        }
    }
}
