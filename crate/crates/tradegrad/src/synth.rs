//! Synthetic tick streams standing in for real exchange data.
//!
//! Ticks arrive on a fixed clock with constant size, so dollar bars come out
//! roughly evenly spaced and all the structure lives in the price path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tradegrad_core::market_data::{Trade, MICROS_PER_DAY};

use crate::config::{check, ConfigError};
use crate::ticks::parse_timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Sine,
    GeometricRandomWalk,
    RegimeSwitch,
}

/// Drift and volatility are per day, in log-price units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub start: String,
    pub days: f64,
    pub tick_seconds: f64,
    pub price: f64,
    pub volume: f64,
    /// Sine: log-price amplitude and period.
    pub amplitude: f64,
    pub period_days: f64,
    /// Sine: iid log-price noise per tick, on top of the wave.
    pub noise: f64,
    pub drift: f64,
    pub volatility: f64,
    /// Regime-switch: the second regime and the mean regime length.
    pub alt_drift: f64,
    pub alt_volatility: f64,
    pub mean_regime_days: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            generator: Generator::Sine,
            start: "2020-01-01T00:00:00+00:00".into(),
            days: 300.0,
            tick_seconds: 300.0,
            price: 100.0,
            volume: 1.0,
            amplitude: 0.05,
            period_days: 2.0,
            noise: 0.0,
            drift: 0.0,
            volatility: 0.01,
            alt_drift: -0.002,
            alt_volatility: 0.02,
            mean_regime_days: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let spec: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        parse_timestamp(&self.start).map_err(|m| ConfigError::Invalid { key: "start", message: m })?;
        check("days", self.days > 0.0 && self.days.is_finite(), "must be positive")?;
        check("tick_seconds", self.tick_seconds >= 1e-6 && self.tick_seconds.is_finite(), "must be at least 1µs")?;
        check("price", self.price > 0.0 && self.price.is_finite(), "must be positive")?;
        check("volume", self.volume > 0.0 && self.volume.is_finite(), "must be positive")?;
        check("amplitude", self.amplitude >= 0.0 && self.amplitude.is_finite(), "must be non-negative")?;
        check("period_days", self.period_days > 0.0 && self.period_days.is_finite(), "must be positive")?;
        check("noise", self.noise >= 0.0 && self.noise.is_finite(), "must be non-negative")?;
        check("drift", self.drift.is_finite(), "must be finite")?;
        check("volatility", self.volatility >= 0.0 && self.volatility.is_finite(), "must be non-negative")?;
        check("alt_drift", self.alt_drift.is_finite(), "must be finite")?;
        check("alt_volatility", self.alt_volatility >= 0.0 && self.alt_volatility.is_finite(), "must be non-negative")?;
        check(
            "mean_regime_days",
            self.mean_regime_days > 0.0 && self.mean_regime_days.is_finite(),
            "must be positive",
        )?;
        Ok(())
    }

    pub fn tick_count(&self) -> usize {
        (self.days * 86_400.0 / self.tick_seconds).floor() as usize
    }
}

/// Deterministic tick stream for `seed`. Assumes a validated spec.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Vec<Trade> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = parse_timestamp(&spec.start).expect("validated start");
    let dt_us = (spec.tick_seconds * 1e6).round() as i64;
    let dt_days = dt_us as f64 / MICROS_PER_DAY as f64;
    let ln_p0 = spec.price.ln();
    let switch_p = (dt_days / spec.mean_regime_days).min(1.0);

    let mut log_p = ln_p0;
    let mut alt = false;
    (0..spec.tick_count())
        .map(|i| {
            let ts = start + dt_us * i as i64;
            let z: f64 = rng.sample(StandardNormal);
            let price = match spec.generator {
                Generator::Sine => {
                    let phase = core::f64::consts::TAU * (i as f64 * dt_days) / spec.period_days;
                    (ln_p0 + spec.amplitude * phase.sin() + spec.noise * z).exp()
                }
                Generator::GeometricRandomWalk => {
                    if i > 0 {
                        log_p += spec.drift * dt_days + spec.volatility * dt_days.sqrt() * z;
                    }
                    log_p.exp()
                }
                Generator::RegimeSwitch => {
                    if i > 0 {
                        if rng.random::<f64>() < switch_p {
                            alt = !alt;
                        }
                        let (mu, sigma) =
                            if alt { (spec.alt_drift, spec.alt_volatility) } else { (spec.drift, spec.volatility) };
                        log_p += mu * dt_days + sigma * dt_days.sqrt() * z;
                    }
                    log_p.exp()
                }
            };
            Trade::new(ts, price, spec.volume).expect("generated trade is valid")
        })
        .collect()
}
