//! Reception timestamp table and its CSV form (`rx_id,tx_id,seq,channel,ticks`).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timestamp::{Ticks, WRAP_32};

pub type ChannelId = u32;

/// Identifier of a radio node, shared by scenario, node table and log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("duplicate reception of packet (tx {tx}, seq {seq}) at rx {rx}")]
    Duplicate { rx: NodeId, tx: NodeId, seq: u64 },
    #[error("packet (tx {tx}, seq {seq}) logged on several channels")]
    ChannelMismatch { tx: NodeId, seq: u64 },
    #[error("sequence numbers of tx {tx} not monotone in time at rx {rx}")]
    NonMonotone { rx: NodeId, tx: NodeId },
    #[error("rx {rx}: gap between consecutive timestamps at row {row} exceeds half the 32-bit wrap period")]
    AmbiguousWrap { rx: NodeId, row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestampRecord {
    pub rx: NodeId,
    pub tx: NodeId,
    pub seq: u64,
    pub channel: ChannelId,
    pub ticks: Ticks,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    rx_id: u32,
    tx_id: u32,
    seq: u64,
    channel: u32,
    ticks: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimestampLog {
    pub records: Vec<TimestampRecord>,
}

impl TimestampLog {
    pub fn new(records: Vec<TimestampRecord>) -> Self {
        TimestampLog { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn channels(&self) -> Vec<ChannelId> {
        let mut c: Vec<_> = self.records.iter().map(|r| r.channel).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Checks key uniqueness and that, per receiver and transmitter,
    /// sequence order agrees with timestamp order.
    pub fn validate(&self) -> Result<(), LogError> {
        let mut keys = HashSet::with_capacity(self.records.len());
        let mut channel_of: HashMap<(NodeId, u64), ChannelId> = HashMap::new();
        let mut streams: HashMap<(NodeId, NodeId), Vec<(u64, Ticks)>> = HashMap::new();
        for r in &self.records {
            if !keys.insert((r.rx, r.tx, r.seq)) {
                return Err(LogError::Duplicate {
                    rx: r.rx,
                    tx: r.tx,
                    seq: r.seq,
                });
            }
            if *channel_of.entry((r.tx, r.seq)).or_insert(r.channel) != r.channel {
                return Err(LogError::ChannelMismatch { tx: r.tx, seq: r.seq });
            }
            streams.entry((r.rx, r.tx)).or_default().push((r.seq, r.ticks));
        }
        for ((rx, tx), mut s) in streams {
            s.sort_by_key(|&(seq, _)| seq);
            if s.windows(2).any(|w| w[1].1 <= w[0].1) {
                return Err(LogError::NonMonotone { rx, tx });
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), LogError> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(CsvRow {
                rx_id: r.rx.0,
                tx_id: r.tx.0,
                seq: r.seq,
                channel: r.channel,
                ticks: r.ticks.to_string(),
            })?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, LogError> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rd.headers()?.clone();
        let expected = ["rx_id", "tx_id", "seq", "channel", "ticks"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(LogError::Row {
                row: 0,
                msg: format!("expected header `{}`", expected.join(",")),
            });
        }
        let mut records = Vec::new();
        for (i, row) in rd.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| LogError::Row {
                row: i + 1,
                msg: e.to_string(),
            })?;
            let ticks = row.ticks.parse().map_err(|e| LogError::Row {
                row: i + 1,
                msg: format!("{e}"),
            })?;
            records.push(TimestampRecord {
                rx: NodeId(row.rx_id),
                tx: NodeId(row.tx_id),
                seq: row.seq,
                channel: row.channel,
                ticks,
            });
        }
        Ok(TimestampLog { records })
    }

    /// The log as a free-running 32-bit counter would have reported it.
    pub fn wrapped(&self) -> TimestampLog {
        TimestampLog {
            records: self
                .records
                .iter()
                .map(|r| TimestampRecord {
                    ticks: r.ticks.with_whole(r.ticks.wrapped32() as i64),
                    ..*r
                })
                .collect(),
        }
    }

    /// Reconstructs 64-bit counts from a 32-bit wrapped log.
    ///
    /// Rows are taken to be in reception order per receiver. The first row of
    /// each receiver is kept as is; every later row advances by the forward
    /// distance modulo 2^32, which must stay below half the wrap period.
    pub fn unwrap_timestamps(&self) -> Result<TimestampLog, LogError> {
        let half = WRAP_32 / 2;
        let mut last: HashMap<NodeId, i64> = HashMap::new();
        let mut records = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let raw = r.ticks.whole().rem_euclid(WRAP_32);
            let whole = match last.get(&r.rx) {
                None => raw,
                Some(&prev) => {
                    let step = (raw - prev).rem_euclid(WRAP_32);
                    if step >= half {
                        return Err(LogError::AmbiguousWrap { rx: r.rx, row: i + 1 });
                    }
                    prev + step
                }
            };
            last.insert(r.rx, whole);
            records.push(TimestampRecord {
                ticks: r.ticks.with_whole(whole),
                ..*r
            });
        }
        Ok(TimestampLog { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rx: u32, tx: u32, seq: u64, ticks: i64) -> TimestampRecord {
        TimestampRecord {
            rx: NodeId(rx),
            tx: NodeId(tx),
            seq,
            channel: 1,
            ticks: Ticks::from_int(ticks),
        }
    }

    #[test]
    fn csv_header_and_round_trip() {
        let log = TimestampLog::new(vec![
            rec(1, 0, 0, 100),
            TimestampRecord {
                ticks: Ticks::from_parts(250, 0.125),
                ..rec(2, 0, 0, 0)
            },
        ]);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("rx_id,tx_id,seq,channel,ticks\n"));
        assert!(text.contains("2,0,0,1,250.125"));
        assert_eq!(TimestampLog::read_csv(&buf[..]).unwrap(), log);
    }

    #[test]
    fn bad_header_rejected() {
        let text = "rx,tx,seq,channel,ticks\n1,0,0,1,5\n";
        assert!(TimestampLog::read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn malformed_row_rejected() {
        let text = "rx_id,tx_id,seq,channel,ticks\n1,0,zero,1,5\n";
        assert!(matches!(
            TimestampLog::read_csv(text.as_bytes()),
            Err(LogError::Row { row: 1, .. })
        ));
        let text = "rx_id,tx_id,seq,channel,ticks\n1,0,0,1,1e5\n";
        assert!(TimestampLog::read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn duplicates_and_order() {
        let dup = TimestampLog::new(vec![rec(1, 0, 3, 10), rec(1, 0, 3, 20)]);
        assert!(matches!(dup.validate(), Err(LogError::Duplicate { .. })));
        let backwards = TimestampLog::new(vec![rec(1, 0, 3, 20), rec(1, 0, 4, 10)]);
        assert!(matches!(backwards.validate(), Err(LogError::NonMonotone { .. })));
        let mut other_channel = rec(2, 0, 3, 15);
        other_channel.channel = 6;
        let mixed = TimestampLog::new(vec![rec(1, 0, 3, 10), other_channel]);
        assert!(matches!(mixed.validate(), Err(LogError::ChannelMismatch { .. })));
        // row order does not matter
        let shuffled = TimestampLog::new(vec![rec(1, 0, 4, 20), rec(1, 0, 3, 10)]);
        assert!(shuffled.validate().is_ok());
    }

    #[test]
    fn unwrap_identity_without_wrap() {
        let log = TimestampLog::new(vec![rec(1, 0, 0, 5), rec(1, 0, 1, 900), rec(2, 0, 0, 7)]);
        assert_eq!(log.unwrap_timestamps().unwrap(), log);
    }

    #[test]
    fn unwrap_single_wrap() {
        let truth = TimestampLog::new(vec![
            rec(1, 0, 0, WRAP_32 - 10),
            rec(1, 0, 1, WRAP_32 + 20),
            rec(1, 0, 2, WRAP_32 + 500),
        ]);
        let wrapped = truth.wrapped();
        assert_eq!(wrapped.records[1].ticks.whole(), 20);
        assert_eq!(wrapped.unwrap_timestamps().unwrap(), truth);
    }

    #[test]
    fn unwrap_rejects_large_gap() {
        let log = TimestampLog::new(vec![rec(1, 0, 0, 10), rec(1, 0, 1, 10 + WRAP_32 / 2 + 1)]);
        assert!(matches!(
            log.wrapped().unwrap_timestamps(),
            Err(LogError::AmbiguousWrap { row: 2, .. })
        ));
    }
}
