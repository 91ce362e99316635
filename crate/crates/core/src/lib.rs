//! Deep policy-gradient trading agents on dollar-volume bars.
//!
//! The crate is `no_std` (it needs `alloc`). It covers the whole decision
//! pipeline: sampling trades into [`market_data::Bar`]s, the
//! transaction-cost- and risk-sensitive trading environment, a small
//! reverse-mode [`tensor`] kernel, the CNN/LSTM [`nn`] function
//! approximators, the two learning [`agents`] and the walk-forward
//! [`backtest`]. File formats, configuration and the command line live in
//! the `tradegrad` crate.
#![no_std]

extern crate alloc;

pub mod agents;
pub mod backtest;
pub mod env;
pub mod market_data;
pub mod nn;
pub mod rng;
pub mod tensor;
