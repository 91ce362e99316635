//! File formats, synthetic markets and the experiment runner around
//! `tradegrad-core`.

pub mod config;
pub mod experiment;
pub mod synth;
pub mod ticks;

pub use tradegrad_core as core;
