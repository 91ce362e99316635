//! Tick CSV: header `timestamp,price,volume`, ISO-8601 timestamps with an
//! explicit offset, one trade per line.

use std::io::{Read, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use tradegrad_core::market_data::{MarketDataError, Trade};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("missing or wrong header, expected `timestamp,price,volume`")]
    Header,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

const HEADER: [&str; 3] = ["timestamp", "price", "volume"];

pub fn parse_timestamp(s: &str) -> Result<i64, String> {
    let dt = DateTime::parse_from_rfc3339(s.trim()).map_err(|e| format!("bad timestamp {s:?}: {e}"))?;
    Ok(dt.timestamp_micros())
}

pub fn format_timestamp(us: i64) -> String {
    DateTime::<Utc>::from_timestamp_micros(us)
        .expect("timestamp in chrono range")
        .to_rfc3339_opts(SecondsFormat::Micros, false)
}

/// Reads a whole tick file. Row order is preserved; any malformed row,
/// non-positive price or volume, or backwards timestamp aborts with the
/// 1-based line number.
pub fn load_ticks<R: Read>(source: R) -> Result<Vec<Trade>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    let header = rdr.headers()?.clone();
    if header.len() != 3 || header.iter().zip(HEADER).any(|(h, want)| h.trim() != want) {
        return Err(IngestError::Header);
    }
    let mut trades = Vec::new();
    let mut last_ts = i64::MIN;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = |message: String| IngestError::Row { line, message };
        if rec.len() != 3 {
            return Err(row(format!("expected 3 fields, found {}", rec.len())));
        }
        let ts = parse_timestamp(&rec[0]).map_err(row)?;
        let price: f64 = rec[1].trim().parse().map_err(|e| row(format!("bad price {:?}: {e}", &rec[1])))?;
        let volume: f64 = rec[2].trim().parse().map_err(|e| row(format!("bad volume {:?}: {e}", &rec[2])))?;
        if ts < last_ts {
            return Err(row(MarketDataError::DecreasingTimestamp { previous: last_ts, current: ts }.to_string()));
        }
        last_ts = ts;
        trades.push(Trade::new(ts, price, volume).map_err(|e| row(e.to_string()))?);
    }
    Ok(trades)
}

pub fn write_ticks<W: Write>(sink: W, trades: &[Trade]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(HEADER)?;
    for t in trades {
        w.write_record([format_timestamp(t.timestamp_us), t.price.to_string(), t.volume.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(s: &str) -> Result<Vec<Trade>, IngestError> {
        load_ticks(s.as_bytes())
    }

    #[test]
    fn parses_offsets_to_utc() {
        let t = load("timestamp,price,volume\n2021-03-01T01:00:00+01:00,10.5,2\n2021-03-01T00:00:01Z,11,1\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].timestamp_us, parse_timestamp("2021-03-01T00:00:00Z").unwrap());
        assert_eq!(t[1].timestamp_us - t[0].timestamp_us, 1_000_000);
        assert_eq!(t[0].price, 10.5);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            "timestamp,price,volume\n2021-03-01T00:00:00Z,1,1\n2021-03-01T00:00:01Z,-1,1\n",
            "timestamp,price,volume\n2021-03-01T00:00:00Z,1,1\n2021-03-01T00:00:01Z,1,0\n",
            "timestamp,price,volume\n2021-03-01T00:00:00Z,1,1\n2021-02-01T00:00:00Z,1,1\n",
            "timestamp,price,volume\n2021-03-01T00:00:00Z,1,1\nyesterday,1,1\n",
            "timestamp,price,volume\n2021-03-01T00:00:00Z,1,1\n2021-03-01T00:00:01Z,1\n",
            "timestamp,price,volume\n2021-03-01T00:00:00Z,1,1\n2021-03-01T00:00:00,1,1\n",
        ];
        for c in cases {
            match load(c) {
                Err(IngestError::Row { line, .. }) => assert_eq!(line, 3, "{c}"),
                other => panic!("{c}: {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_bad_header() {
        assert!(matches!(load("time,price,volume\n"), Err(IngestError::Header)));
    }

    #[test]
    fn write_then_load_is_identity() {
        let trades = vec![
            Trade::new(1_600_000_000_123_456, 100.125, 3.0).unwrap(),
            Trade::new(1_600_000_001_000_000, 0.1 + 0.2, 1e-3).unwrap(),
        ];
        let mut buf = Vec::new();
        write_ticks(&mut buf, &trades).unwrap();
        assert_eq!(load_ticks(buf.as_slice()).unwrap(), trades);
    }
}
