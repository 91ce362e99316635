//! Experiment configuration: flat `key = value` text (TOML syntax, no
//! tables). Every key is optional; missing keys take the default hyperparameters.

use serde::{Deserialize, Serialize};
use tradegrad_core::agents::{AgentConfig, Algorithm, ExplorationSchedule};
use tradegrad_core::backtest::{BacktestConfig, EarlyStopConfig, SplitSpec};
use tradegrad_core::env::{EnvConfig, RewardParams};
use tradegrad_core::market_data::SamplerConfig;
use tradegrad_core::nn::{NetConfig, SeqLayerKind};
use tradegrad_core::tensor::OptimizerConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("invalid `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

pub(crate) fn check(key: &'static str, ok: bool, message: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid { key, message: message.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlgorithmName {
    #[serde(rename = "PG", alias = "pg")]
    Pg,
    #[serde(rename = "AC", alias = "ac")]
    Ac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeqKindName {
    #[serde(rename = "CNN", alias = "cnn")]
    Cnn,
    #[serde(rename = "LSTM", alias = "lstm")]
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Tick CSV to sample bars from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    /// Synthetic spec file, used instead of `data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<String>,
    pub algorithm: AlgorithmName,
    pub seq_kind: SeqKindName,
    pub lambda_sigma: f64,
    pub lambda_c: f64,
    pub lookback: usize,
    pub n: usize,
    pub alpha_actor: f64,
    pub alpha_critic: f64,
    pub batch_size: usize,
    pub memory_size: usize,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    pub tgt: f64,
    pub initial_threshold: f64,
    pub sma_days: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub check_every: usize,
    pub max_epochs: usize,
    /// Defaults to 252 · tgt.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bars_per_year: Option<f64>,
    pub seed: u64,
    pub runs: u32,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let sampler = SamplerConfig::default();
        let reward = RewardParams::default();
        let split = SplitSpec::default();
        let stop = EarlyStopConfig::default();
        let explore = ExplorationSchedule::default();
        let agent = AgentConfig::new(Algorithm::Pg, SeqLayerKind::Cnn, 20);
        Self {
            data: None,
            synthetic: None,
            algorithm: AlgorithmName::Pg,
            seq_kind: SeqKindName::Cnn,
            lambda_sigma: reward.lambda_sigma,
            lambda_c: reward.lambda_c,
            lookback: reward.lookback,
            n: EnvConfig::default().n,
            alpha_actor: agent.actor.learning_rate,
            alpha_critic: agent.critic.learning_rate,
            batch_size: agent.batch_size,
            memory_size: agent.memory_size,
            epsilon: explore.epsilon,
            epsilon_decay: explore.decay,
            epsilon_min: explore.min,
            weight_decay: opt.weight_decay,
            clip_norm: opt.clip_norm,
            dropout: agent.net.dropout,
            tgt: sampler.tgt,
            initial_threshold: sampler.initial_threshold,
            sma_days: sampler.window_days,
            train_frac: split.train_frac,
            val_frac: split.val_frac,
            test_frac: split.test_frac,
            check_every: stop.check_every,
            max_epochs: stop.max_epochs,
            bars_per_year: None,
            seed: 0,
            runs: 10,
            out: "results".into(),
        }
    }
}

/// Parses and validates a config file's text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(
            "data",
            !(self.data.is_some() && self.synthetic.is_some()),
            "give either `data` or `synthetic`, not both",
        )?;
        check("lambda_sigma", self.lambda_sigma >= 0.0 && self.lambda_sigma.is_finite(), "must be >= 0")?;
        check("lambda_c", unit(self.lambda_c), "must be in [0, 1]")?;
        check("lookback", self.lookback >= 2, "must be >= 2")?;
        let min_n = if self.seq_kind == SeqKindName::Cnn { 6 } else { 1 };
        check("n", self.n >= min_n, &format!("must be >= {min_n} for {:?}", self.seq_kind))?;
        check("alpha_actor", positive(self.alpha_actor), "must be positive")?;
        check("alpha_critic", positive(self.alpha_critic), "must be positive")?;
        check("batch_size", self.batch_size >= 1, "must be >= 1")?;
        check("memory_size", self.memory_size >= self.batch_size, "must be >= batch_size")?;
        check("epsilon", positive(self.epsilon), "must be positive")?;
        check("epsilon_decay", self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0, "must be in (0, 1]")?;
        check(
            "epsilon_min",
            positive(self.epsilon_min) && self.epsilon_min <= self.epsilon,
            "must be in (0, epsilon]",
        )?;
        check("weight_decay", self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "must be >= 0")?;
        check("clip_norm", positive(self.clip_norm), "must be positive")?;
        check("dropout", (0.0..1.0).contains(&self.dropout), "must be in [0, 1)")?;
        check("tgt", positive(self.tgt), "must be positive")?;
        check("initial_threshold", positive(self.initial_threshold), "must be positive")?;
        check("sma_days", self.sma_days >= 1, "must be >= 1")?;
        for (key, f) in [("train_frac", self.train_frac), ("val_frac", self.val_frac), ("test_frac", self.test_frac)] {
            check(key, f > 0.0 && f < 1.0, "must be in (0, 1)")?;
        }
        check(
            "test_frac",
            (self.train_frac + self.val_frac + self.test_frac - 1.0).abs() <= 1e-9,
            "split fractions must sum to 1",
        )?;
        check("check_every", self.check_every >= 1, "must be >= 1")?;
        check("max_epochs", self.max_epochs >= 1, "must be >= 1")?;
        check("bars_per_year", self.bars_per_year.map_or(true, positive), "must be positive")?;
        check("runs", self.runs >= 1, "must be >= 1")?;
        check("seed", i64::try_from(self.seed).is_ok(), "must fit in a signed 64-bit integer")?;
        Ok(())
    }

    /// Text that [`parse_config`] turns back into an equal config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_name(&self) -> String {
        let alg = match self.algorithm {
            AlgorithmName::Pg => "PG",
            AlgorithmName::Ac => "AC",
        };
        let seq = match self.seq_kind {
            SeqKindName::Cnn => "CNN",
            SeqKindName::Lstm => "LSTM",
        };
        format!("{alg}-{seq}")
    }

    pub fn algorithm_kind(&self) -> Algorithm {
        match self.algorithm {
            AlgorithmName::Pg => Algorithm::Pg,
            AlgorithmName::Ac => Algorithm::Ac,
        }
    }

    pub fn seq_layer(&self) -> SeqLayerKind {
        match self.seq_kind {
            SeqKindName::Cnn => SeqLayerKind::Cnn,
            SeqKindName::Lstm => SeqLayerKind::Lstm,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { tgt: self.tgt, initial_threshold: self.initial_threshold, window_days: self.sma_days }
    }

    pub fn backtest(&self) -> BacktestConfig {
        let env = EnvConfig {
            n: self.n,
            reward: RewardParams {
                lambda_c: self.lambda_c,
                lambda_sigma: self.lambda_sigma,
                lookback: self.lookback,
                ..RewardParams::default()
            },
        };
        let opt = |lr: f64| OptimizerConfig {
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..OptimizerConfig::with_learning_rate(lr)
        };
        let agent = AgentConfig {
            net: NetConfig { dropout: self.dropout, ..NetConfig::new(self.seq_layer(), self.n) },
            actor: opt(self.alpha_actor),
            critic: opt(self.alpha_critic),
            batch_size: self.batch_size,
            memory_size: self.memory_size,
            exploration: ExplorationSchedule {
                epsilon: self.epsilon,
                decay: self.epsilon_decay,
                min: self.epsilon_min,
            },
            ..AgentConfig::new(self.algorithm_kind(), self.seq_layer(), self.n)
        };
        BacktestConfig {
            split: SplitSpec { train_frac: self.train_frac, val_frac: self.val_frac, test_frac: self.test_frac },
            early_stop: EarlyStopConfig { check_every: self.check_every, max_epochs: self.max_epochs },
            bars_per_year: self.bars_per_year.unwrap_or(252.0 * self.tgt),
            ..BacktestConfig::new(env, agent)
        }
    }
}
