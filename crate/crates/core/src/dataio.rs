//! Node metadata, log loading and blind/pivot packet pairing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Position;
use crate::log::{ChannelId, LogError, NodeId, TimestampLog};
use crate::sim::{NodeRole, Scenario, WrapMode, DEFAULT_TICK_RATE_HZ, SCENARIO_VERSION};
use crate::timestamp::Ticks;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("invalid node table: {0}")]
    Nodes(String),
    #[error("log row {row} references unknown node {node}")]
    UnknownNode { row: usize, node: NodeId },
    #[error("no pairable blind/pivot packets on channel {channel}")]
    NoPairs { channel: ChannelId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: NodeId,
    pub role: NodeRole,
    /// Required for everything but the blind node. A blind position, when
    /// present, is ground truth for evaluation and never read by estimation.
    #[serde(default)]
    pub position: Option<Position>,
}

fn default_tick_rate() -> f64 {
    DEFAULT_TICK_RATE_HZ
}

fn default_version() -> u32 {
    SCENARIO_VERSION
}

/// Node roles and positions. A scenario file parses as a node table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTable {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_tick_rate")]
    pub tick_rate_hz: f64,
    #[serde(default)]
    pub wrap_mode: WrapMode,
    pub nodes: Vec<NodeEntry>,
}

impl NodeTable {
    pub fn from_scenario(s: &Scenario) -> Self {
        NodeTable {
            version: s.version,
            tick_rate_hz: s.tick_rate_hz,
            wrap_mode: s.wrap_mode,
            nodes: s
                .nodes
                .iter()
                .map(|n| NodeEntry {
                    id: n.id,
                    role: n.role,
                    position: Some(n.position),
                })
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let f = File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let table: NodeTable =
            serde_json::from_reader(BufReader::new(f)).map_err(|source| DataError::Json {
                path: path.display().to_string(),
                source,
            })?;
        table.validate()?;
        Ok(table)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeEntry> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn position(&self, id: NodeId) -> Option<Position> {
        self.node(id).and_then(|n| n.position)
    }

    pub fn blind(&self) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.role == NodeRole::Blind).map(|n| n.id)
    }

    /// Ground-truth blind position, if the table carries one.
    pub fn blind_truth(&self) -> Option<Position> {
        self.blind().and_then(|b| self.position(b))
    }

    pub fn pivots(&self) -> Vec<NodeId> {
        self.ids_with(|r| r == NodeRole::Pivot)
    }

    pub fn active_anchors(&self) -> Vec<NodeId> {
        self.ids_with(|r| r == NodeRole::ActiveAnchor)
    }

    /// Every node that timestamps receptions, sorted by id.
    pub fn receivers(&self) -> Vec<NodeId> {
        self.ids_with(NodeRole::receives)
    }

    fn ids_with(&self, pred: impl Fn(NodeRole) -> bool) -> Vec<NodeId> {
        let mut ids: Vec<_> = self.nodes.iter().filter(|n| pred(n.role)).map(|n| n.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Nodes(m));
        if self.version != SCENARIO_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if !(self.tick_rate_hz > 0.0 && self.tick_rate_hz.is_finite()) {
            return bad(format!("tick rate {}", self.tick_rate_hz));
        }
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return bad(format!("duplicate node id {}", n.id));
            }
            match (n.role, n.position) {
                (NodeRole::Blind, _) => {}
                (_, None) => return bad(format!("node {} has no position", n.id)),
                (_, Some(p)) => {
                    if p.validate().is_err() {
                        return bad(format!("node {} has a non-finite position", n.id));
                    }
                }
            }
        }
        let blinds = self.nodes.iter().filter(|n| n.role == NodeRole::Blind).count();
        if blinds != 1 {
            return bad(format!("expected one blind node, found {blinds}"));
        }
        if self.receivers().len() < 3 {
            return bad("need at least 3 anchors".into());
        }
        if self.pivots().is_empty() && self.active_anchors().is_empty() {
            return bad("need a pivot or an active anchor".into());
        }
        Ok(())
    }

    /// Rejects rows referencing ids absent from the table.
    pub fn check_log(&self, log: &TimestampLog) -> Result<(), DataError> {
        let known: HashSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        for (i, r) in log.records.iter().enumerate() {
            for node in [r.rx, r.tx] {
                if !known.contains(&node) {
                    return Err(DataError::UnknownNode { row: i + 1, node });
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a node table and its timestamp log. Logs declared as
/// 32-bit wrapped are unwrapped before validation.
pub fn load(nodes_file: &Path, log_file: &Path) -> Result<(NodeTable, TimestampLog), DataError> {
    let nodes = NodeTable::read(nodes_file)?;
    let f = File::open(log_file).map_err(|source| DataError::Io {
        path: log_file.display().to_string(),
        source,
    })?;
    let mut log = TimestampLog::read_csv(BufReader::new(f))?;
    if nodes.wrap_mode == WrapMode::Bits32 {
        log = log.unwrap_timestamps()?;
    }
    nodes.check_log(&log)?;
    log.validate()?;
    Ok((nodes, log))
}

/// Blind and pivot timestamps of one packet pair at one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorEntry {
    pub anchor: NodeId,
    pub blind: Ticks,
    pub pivot: Ticks,
}

/// One blind packet and the pivot packet that follows it, as seen by every
/// anchor that received both.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedObservation {
    /// Position of the pair within its channel, in blind sequence order.
    pub index: usize,
    pub channel: ChannelId,
    pub blind_seq: u64,
    pub pivot_seq: u64,
    /// Sorted by anchor id.
    pub entries: Vec<AnchorEntry>,
    pub complete: bool,
}

impl PairedObservation {
    pub fn entry(&self, anchor: NodeId) -> Option<&AnchorEntry> {
        self.entries
            .binary_search_by_key(&anchor, |e| e.anchor)
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Pairs blind and pivot packets on `channel` for a single-pivot table.
pub fn pair_packets(
    log: &TimestampLog,
    nodes: &NodeTable,
    channel: ChannelId,
) -> Result<Vec<PairedObservation>, DataError> {
    let blind = nodes
        .blind()
        .ok_or_else(|| DataError::Nodes("no blind node".into()))?;
    let pivots = nodes.pivots();
    let [pivot] = pivots[..] else {
        return Err(DataError::Nodes(format!(
            "single-pivot pairing needs exactly one pivot, found {}",
            pivots.len()
        )));
    };
    pair_packets_for(log, blind, pivot, &nodes.receivers(), channel)
}

/// Pairs each blind packet with the next packet of `pivot` at every receiver.
///
/// Per receiver, the pivot packet with the smallest local timestamp after the
/// blind packet is chosen. Across receivers the pivot sequence number chosen
/// most often wins (lowest on ties); receivers that disagree, e.g. because
/// they lost the pivot packet, are left out of that pair.
pub fn pair_packets_for(
    log: &TimestampLog,
    blind: NodeId,
    pivot: NodeId,
    receivers: &[NodeId],
    channel: ChannelId,
) -> Result<Vec<PairedObservation>, DataError> {
    let rx_set: HashSet<NodeId> = receivers.iter().copied().collect();
    let mut streams: HashMap<NodeId, Vec<(Ticks, NodeId, u64)>> = HashMap::new();
    for r in &log.records {
        if r.channel == channel && rx_set.contains(&r.rx) && (r.tx == blind || r.tx == pivot) {
            streams.entry(r.rx).or_default().push((r.ticks, r.tx, r.seq));
        }
    }

    // blind seq -> anchor -> (pivot seq, blind ts, pivot ts)
    let mut candidates: BTreeMap<u64, BTreeMap<NodeId, (u64, Ticks, Ticks)>> = BTreeMap::new();
    for (&rx, stream) in &mut streams {
        stream.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("ticks are totally ordered")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut pending: Vec<(u64, Ticks)> = Vec::new();
        for &(ts, tx, seq) in stream.iter() {
            if tx == blind {
                pending.push((seq, ts));
            } else {
                for (bseq, bts) in pending.drain(..) {
                    if ts > bts {
                        candidates.entry(bseq).or_default().insert(rx, (seq, bts, ts));
                    }
                }
            }
        }
    }

    let mut out = Vec::new();
    for (blind_seq, per_anchor) in candidates {
        let mut votes: BTreeMap<u64, usize> = BTreeMap::new();
        for &(pseq, _, _) in per_anchor.values() {
            *votes.entry(pseq).or_default() += 1;
        }
        // max count, lowest seq on ties (BTreeMap iterates ascending)
        let (pivot_seq, _) = votes
            .iter()
            .fold((0u64, 0usize), |best, (&s, &c)| if c > best.1 { (s, c) } else { best });
        let entries: Vec<AnchorEntry> = per_anchor
            .into_iter()
            .filter(|(_, (pseq, _, _))| *pseq == pivot_seq)
            .map(|(anchor, (_, b, p))| AnchorEntry {
                anchor,
                blind: b,
                pivot: p,
            })
            .collect();
        let complete = entries.len() == rx_set.len();
        out.push(PairedObservation {
            index: out.len(),
            channel,
            blind_seq,
            pivot_seq,
            entries,
            complete,
        });
    }
    if out.is_empty() {
        return Err(DataError::NoPairs { channel });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::TimestampRecord;

    fn rec(rx: u32, tx: u32, seq: u64, ticks: i64) -> TimestampRecord {
        TimestampRecord {
            rx: NodeId(rx),
            tx: NodeId(tx),
            seq,
            channel: 1,
            ticks: Ticks::from_int(ticks),
        }
    }

    /// Blind = 0, pivot = 1, anchors 2..=4; n alternating pairs.
    fn alternating(n: u64) -> TimestampLog {
        let mut rows = Vec::new();
        for i in 0..n {
            for rx in 2..=4u32 {
                rows.push(rec(rx, 0, i, (i * 1000 + rx as u64) as i64));
                rows.push(rec(rx, 1, i, (i * 1000 + 500 + rx as u64) as i64));
            }
        }
        TimestampLog::new(rows)
    }

    fn table() -> NodeTable {
        let nodes = vec![
            NodeEntry { id: NodeId(0), role: NodeRole::Blind, position: None },
            NodeEntry { id: NodeId(1), role: NodeRole::Pivot, position: Some(Position::new(5.0, 5.0)) },
            NodeEntry { id: NodeId(2), role: NodeRole::Anchor, position: Some(Position::new(0.0, 0.0)) },
            NodeEntry { id: NodeId(3), role: NodeRole::Anchor, position: Some(Position::new(10.0, 0.0)) },
            NodeEntry { id: NodeId(4), role: NodeRole::Anchor, position: Some(Position::new(0.0, 10.0)) },
        ];
        NodeTable { version: 1, tick_rate_hz: 22e6, wrap_mode: WrapMode::None, nodes }
    }

    #[test]
    fn alternating_pairs_all_complete() {
        let obs = pair_packets(&alternating(10), &table(), 1).unwrap();
        assert_eq!(obs.len(), 10);
        for (i, o) in obs.iter().enumerate() {
            assert!(o.complete);
            assert_eq!(o.index, i);
            assert_eq!(o.blind_seq, i as u64);
            assert_eq!(o.pivot_seq, i as u64);
            for e in &o.entries {
                assert!(e.pivot > e.blind);
            }
        }
    }

    #[test]
    fn lost_pivot_packet_marks_pair_incomplete() {
        let mut log = alternating(5);
        log.records.retain(|r| !(r.rx == NodeId(3) && r.tx == NodeId(1) && r.seq == 2));
        let obs = pair_packets(&log, &table(), 1).unwrap();
        assert_eq!(obs.len(), 5);
        let o = &obs[2];
        assert!(!o.complete);
        assert!(o.entry(NodeId(3)).is_none());
        assert!(o.entry(NodeId(2)).is_some());
        assert!(obs.iter().enumerate().all(|(i, o)| i == 2 || o.complete));
    }

    #[test]
    fn row_order_does_not_matter() {
        let log = alternating(8);
        let mut rev = log.clone();
        rev.records.reverse();
        rev.records.swap(3, 17);
        assert_eq!(pair_packets(&log, &table(), 1).unwrap(), pair_packets(&rev, &table(), 1).unwrap());
    }

    #[test]
    fn no_pairs_is_an_error() {
        let mut log = alternating(3);
        log.records.retain(|r| r.tx == NodeId(0));
        assert!(matches!(pair_packets(&log, &table(), 1), Err(DataError::NoPairs { .. })));
        assert!(matches!(pair_packets(&alternating(3), &table(), 6), Err(DataError::NoPairs { .. })));
    }

    #[test]
    fn table_validation() {
        let mut t = table();
        t.nodes[2].position = None;
        assert!(t.validate().is_err());
        let mut t = table();
        t.nodes.remove(4);
        assert!(t.validate().is_err());
        let mut t = table();
        t.nodes[1].role = NodeRole::Anchor;
        t.nodes.push(NodeEntry { id: NodeId(9), role: NodeRole::Anchor, position: Some(Position::default()) });
        assert!(t.validate().is_err(), "no transmitter in known position");
        assert!(table().validate().is_ok());
    }

    #[test]
    fn unknown_node_in_log() {
        let mut log = alternating(2);
        log.records.push(rec(7, 0, 0, 5));
        assert!(matches!(table().check_log(&log), Err(DataError::UnknownNode { node: NodeId(7), .. })));
    }
}
