//! Dollar-volume bar sampling with a self-adjusting threshold.
//!
//! Trades are summed by `price·volume` and a bar is emitted as soon as the
//! running sum strictly exceeds the threshold `δ`. At every UTC day
//! boundary `δ` is reset to the mean daily dollar volume of the last 90
//! observed days divided by the target number of bars per day.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use thiserror::Error;

pub const MICROS_PER_DAY: i64 = 86_400_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketDataError {
    #[error("price must be positive and finite, got {0}")]
    InvalidPrice(f64),
    #[error("volume must be positive and finite, got {0}")]
    InvalidVolume(f64),
    #[error("timestamp {current} precedes previous timestamp {previous}")]
    DecreasingTimestamp { previous: i64, current: i64 },
}

/// One market trade. Timestamps are UTC microseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trade {
    pub timestamp_us: i64,
    pub price: f64,
    pub volume: f64,
}

impl Trade {
    pub fn new(timestamp_us: i64, price: f64, volume: f64) -> Result<Self, MarketDataError> {
        if !(price > 0.0 && price.is_finite()) {
            return Err(MarketDataError::InvalidPrice(price));
        }
        if !(volume > 0.0 && volume.is_finite()) {
            return Err(MarketDataError::InvalidVolume(volume));
        }
        Ok(Self { timestamp_us, price, volume })
    }

    pub fn dollar_volume(&self) -> f64 {
        self.price * self.volume
    }

    /// UTC calendar day index (days since the epoch).
    pub fn day(&self) -> i64 {
        self.timestamp_us.div_euclid(MICROS_PER_DAY)
    }
}

/// Checks that a stream is non-decreasing in time.
pub fn check_ordered(trades: &[Trade]) -> Result<(), MarketDataError> {
    for w in trades.windows(2) {
        if w[1].timestamp_us < w[0].timestamp_us {
            return Err(MarketDataError::DecreasingTimestamp {
                previous: w[0].timestamp_us,
                current: w[1].timestamp_us,
            });
        }
    }
    Ok(())
}

/// A dollar-volume-sampled observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
    pub dollar_volume: f64,
    pub start_ts: i64,
    pub end_ts: i64,
    /// The threshold `δ` the bar breached.
    pub threshold: f64,
}

impl Bar {
    /// A bar with identical OHLC, mostly useful for tests and synthetic paths.
    pub fn flat(price: f64, ts: i64) -> Self {
        Self {
            open: price,
            high: price,
            low: price,
            close: price,
            volume: 1.0,
            dollar_volume: price,
            start_ts: ts,
            end_ts: ts,
            threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Target number of bars per day.
    pub tgt: f64,
    /// `δ` used until the first day completes.
    pub initial_threshold: f64,
    /// Length of the daily dollar-volume moving average.
    pub window_days: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { tgt: 5.0, initial_threshold: 1_000_000.0, window_days: 90 }
    }
}

/// Moving window of completed-day dollar volumes and the derived `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    daily_dollar_volumes: VecDeque<f64>,
    capacity: usize,
    tgt: f64,
    threshold: f64,
}

impl ThresholdState {
    pub fn new(cfg: &SamplerConfig) -> Self {
        assert!(cfg.tgt > 0.0 && cfg.initial_threshold > 0.0 && cfg.window_days > 0);
        Self {
            daily_dollar_volumes: VecDeque::with_capacity(cfg.window_days),
            capacity: cfg.window_days,
            tgt: cfg.tgt,
            threshold: cfg.initial_threshold,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn days(&self) -> impl Iterator<Item = f64> + '_ {
        self.daily_dollar_volumes.iter().copied()
    }

    /// Records a completed day and recomputes `δ`. An all-zero window keeps
    /// the previous threshold so that `δ` stays positive.
    pub fn update_threshold(&mut self, completed_day_total: f64) {
        debug_assert!(completed_day_total >= 0.0);
        if self.daily_dollar_volumes.len() == self.capacity {
            self.daily_dollar_volumes.pop_front();
        }
        self.daily_dollar_volumes.push_back(completed_day_total.max(0.0));
        let n = self.daily_dollar_volumes.len() as f64;
        let mean = self.daily_dollar_volumes.iter().sum::<f64>() / n;
        if mean > 0.0 {
            self.threshold = mean / self.tgt;
        }
    }
}

/// Running aggregates of the bar under construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BarAccumulator {
    chi: f64,
    open: f64,
    high: f64,
    low: f64,
    volume: f64,
    start_ts: i64,
    trades: usize,
}

impl BarAccumulator {
    /// Dollar volume accumulated since the last emitted bar.
    pub fn chi(&self) -> f64 {
        self.chi
    }

    pub fn trades(&self) -> usize {
        self.trades
    }

    /// Adds `trade`; emits and resets when the running sum strictly exceeds
    /// `threshold`. The breaching trade closes the emitted bar.
    pub fn accumulate(&mut self, trade: &Trade, threshold: f64) -> Option<Bar> {
        if self.trades == 0 {
            self.open = trade.price;
            self.high = trade.price;
            self.low = trade.price;
            self.start_ts = trade.timestamp_us;
        } else {
            self.high = self.high.max(trade.price);
            self.low = self.low.min(trade.price);
        }
        self.chi += trade.dollar_volume();
        self.volume += trade.volume;
        self.trades += 1;
        if self.chi > threshold {
            let bar = Bar {
                open: self.open,
                high: self.high,
                low: self.low,
                close: trade.price,
                volume: self.volume,
                dollar_volume: self.chi,
                start_ts: self.start_ts,
                end_ts: trade.timestamp_us,
                threshold,
            };
            *self = Self::default();
            Some(bar)
        } else {
            None
        }
    }
}

/// Streaming dollar-bar sampler: threshold state, open bar and day tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct DollarBarSampler {
    threshold: ThresholdState,
    acc: BarAccumulator,
    current_day: Option<i64>,
    day_total: f64,
}

impl DollarBarSampler {
    pub fn new(cfg: &SamplerConfig) -> Self {
        Self { threshold: ThresholdState::new(cfg), acc: BarAccumulator::default(), current_day: None, day_total: 0.0 }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.threshold()
    }

    pub fn threshold_state(&self) -> &ThresholdState {
        &self.threshold
    }

    pub fn accumulator(&self) -> &BarAccumulator {
        &self.acc
    }

    pub fn push(&mut self, trade: &Trade) -> Option<Bar> {
        let day = trade.day();
        match self.current_day {
            Some(d) if day > d => {
                self.threshold.update_threshold(self.day_total);
                self.day_total = 0.0;
                self.current_day = Some(day);
            }
            None => self.current_day = Some(day),
            _ => {}
        }
        self.day_total += trade.dollar_volume();
        self.acc.accumulate(trade, self.threshold.threshold())
    }
}

/// Samples an ordered trade stream into bars. The trailing partial bar is
/// dropped.
pub fn sample_stream(trades: &[Trade], cfg: &SamplerConfig) -> Vec<Bar> {
    let mut sampler = DollarBarSampler::new(cfg);
    trades.iter().filter_map(|t| sampler.push(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn trade(ts: i64, p: f64, v: f64) -> Trade {
        Trade::new(ts, p, v).unwrap()
    }

    #[test]
    fn constant_window_threshold() {
        let mut s = ThresholdState::new(&SamplerConfig::default());
        for _ in 0..120 {
            s.update_threshold(1_000_000.0);
        }
        assert_eq!(s.threshold(), 200_000.0);
        assert_eq!(s.days().count(), 90);
    }

    #[test]
    fn partial_window_threshold() {
        let cfg = SamplerConfig { tgt: 2.0, ..SamplerConfig::default() };
        let mut s = ThresholdState::new(&cfg);
        s.update_threshold(100.0);
        s.update_threshold(300.0);
        assert_eq!(s.threshold(), 100.0);
    }

    #[test]
    fn oldest_day_evicted_first() {
        let cfg = SamplerConfig { tgt: 1.0, window_days: 3, ..SamplerConfig::default() };
        let mut s = ThresholdState::new(&cfg);
        for v in [10.0, 20.0, 30.0, 40.0] {
            s.update_threshold(v);
        }
        assert_eq!(s.days().collect::<Vec<_>>(), vec![20.0, 30.0, 40.0]);
        assert_eq!(s.threshold(), 30.0);
    }

    #[test]
    fn two_trade_bar() {
        let mut acc = BarAccumulator::default();
        assert!(acc.accumulate(&trade(0, 10.0, 4.0), 100.0).is_none());
        assert_eq!(acc.chi(), 40.0);
        let bar = acc.accumulate(&trade(1, 10.0, 7.0), 100.0).unwrap();
        assert_eq!(
            (bar.open, bar.high, bar.low, bar.close, bar.volume, bar.dollar_volume),
            (10.0, 10.0, 10.0, 10.0, 11.0, 110.0)
        );
        assert_eq!(acc.chi(), 0.0);
    }

    #[test]
    fn single_trade_bar() {
        let mut acc = BarAccumulator::default();
        let bar = acc.accumulate(&trade(5, 12.5, 10.0), 100.0).unwrap();
        assert_eq!((bar.open, bar.high, bar.low, bar.close), (12.5, 12.5, 12.5, 12.5));
        assert_eq!((bar.start_ts, bar.end_ts), (5, 5));
    }

    #[test]
    fn three_trade_ohlc() {
        let mut acc = BarAccumulator::default();
        assert!(acc.accumulate(&trade(0, 10.0, 6.0), 100.0).is_none());
        assert!(acc.accumulate(&trade(1, 12.0, 2.0), 100.0).is_none());
        let bar = acc.accumulate(&trade(2, 9.0, 3.0), 100.0).unwrap();
        assert_eq!((bar.open, bar.high, bar.low, bar.close), (10.0, 12.0, 9.0, 9.0));
        assert_eq!(bar.dollar_volume, 111.0);
    }

    #[test]
    fn exact_threshold_does_not_breach() {
        let mut acc = BarAccumulator::default();
        assert!(acc.accumulate(&trade(0, 10.0, 10.0), 100.0).is_none());
    }

    #[test]
    fn empty_stream() {
        assert!(sample_stream(&[], &SamplerConfig::default()).is_empty());
    }

    #[test]
    fn warmed_up_day_gives_five_bars() {
        // Day 0 sets δ = V/5; day 1 is identical, so about five bars.
        let per_day = 1000;
        let mut trades = Vec::new();
        for day in 0..3i64 {
            for k in 0..per_day {
                let ts = day * MICROS_PER_DAY + k as i64 * 1_000_000;
                trades.push(trade(ts, 50.0, 2.0));
            }
        }
        let cfg = SamplerConfig { tgt: 5.0, initial_threshold: 1e12, window_days: 90 };
        let bars = sample_stream(&trades, &cfg);
        let day1 = bars.iter().filter(|b| b.end_ts.div_euclid(MICROS_PER_DAY) == 1).count();
        assert!((4..=6).contains(&day1), "{day1}");
        assert!(bars.iter().all(|b| b.threshold == 100_000.0 / 5.0));
    }

    #[test]
    fn invalid_trades_rejected() {
        assert!(Trade::new(0, 0.0, 1.0).is_err());
        assert!(Trade::new(0, 1.0, -1.0).is_err());
        assert!(Trade::new(0, f64::NAN, 1.0).is_err());
        assert!(check_ordered(&[trade(5, 1.0, 1.0), trade(4, 1.0, 1.0)]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn stream() -> impl Strategy<Value = Vec<Trade>> {
            proptest::collection::vec((0i64..20_000_000_000, 1.0f64..200.0, 0.1f64..50.0), 0..400).prop_map(
                |mut raw| {
                    raw.sort_by_key(|r| r.0);
                    raw.into_iter().map(|(t, p, v)| trade(t, p, v)).collect()
                },
            )
        }

        fn cfg() -> SamplerConfig {
            SamplerConfig { tgt: 5.0, initial_threshold: 500.0, window_days: 90 }
        }

        proptest! {
            #[test]
            fn bars_strictly_breach(trades in stream()) {
                for b in sample_stream(&trades, &cfg()) {
                    prop_assert!(b.dollar_volume > b.threshold);
                    prop_assert!(b.low <= b.open.min(b.close));
                    prop_assert!(b.high >= b.open.max(b.close));
                    prop_assert!(b.start_ts <= b.end_ts);
                }
            }

            #[test]
            fn dollar_volume_is_conserved(trades in stream()) {
                let mut sampler = DollarBarSampler::new(&cfg());
                let mut emitted = 0.0;
                for t in &trades {
                    if let Some(b) = sampler.push(t) {
                        emitted += b.dollar_volume;
                    }
                }
                let total: f64 = trades.iter().map(Trade::dollar_volume).sum();
                let residual = total - emitted;
                prop_assert!((residual - sampler.accumulator().chi()).abs() <= 1e-9 * total.max(1.0));
                prop_assert!(sampler.accumulator().chi() <= sampler.threshold());
            }

            #[test]
            fn bars_partition_the_stream(trades in stream()) {
                // Each bar's trades are the contiguous run between emissions.
                let mut sampler = DollarBarSampler::new(&cfg());
                let mut start = 0usize;
                for (i, t) in trades.iter().enumerate() {
                    if let Some(b) = sampler.push(t) {
                        let run = &trades[start..=i];
                        prop_assert_eq!(b.open, run[0].price);
                        prop_assert_eq!(b.close, run[run.len() - 1].price);
                        let dv: f64 = run.iter().map(Trade::dollar_volume).sum();
                        prop_assert!((dv - b.dollar_volume).abs() <= 1e-9 * dv);
                        start = i + 1;
                    }
                }
                prop_assert_eq!(sampler.accumulator().trades(), trades.len() - start);
            }

            #[test]
            fn truncation_keeps_earlier_bars(trades in stream(), cut in 0usize..400) {
                let full = sample_stream(&trades, &cfg());
                let cut = cut.min(trades.len());
                let part = sample_stream(&trades[..cut], &cfg());
                prop_assert!(part.len() <= full.len());
                prop_assert_eq!(&full[..part.len()], &part[..]);
            }

            #[test]
            fn threshold_doubles_with_volume(base in 1e3f64..1e7) {
                let mut s = ThresholdState::new(&cfg());
                for _ in 0..90 {
                    s.update_threshold(base);
                }
                let before = s.threshold();
                for _ in 0..90 {
                    s.update_threshold(2.0 * base);
                }
                prop_assert!((s.threshold() - 2.0 * before).abs() <= 1e-9 * before);
            }
        }
    }
}
