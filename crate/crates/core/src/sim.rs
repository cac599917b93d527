//! Deterministic scenario simulator producing anchor timestamp logs.
//!
//! Transmissions are scheduled in cycles of one inter-departure period. The
//! blind node owns the first slot of each cycle, followed by every transmitter
//! in known position in id order, so a blind packet is always followed by one
//! packet of each known transmitter before the next blind packet. Channels are
//! visited one after the other, each for `packets_per_channel` cycles.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ClockError, ClockModel, SplitSeconds};
use crate::geometry::{distance, GeometryError, Position, SPEED_OF_LIGHT};
use crate::log::{ChannelId, NodeId, TimestampLog, TimestampRecord};

pub const SCENARIO_VERSION: u32 = 1;
pub const DEFAULT_TICK_RATE_HZ: f64 = 22e6;
pub const DEFAULT_INTER_DEPARTURE_S: f64 = 0.010;
/// Contention window of 15 slots of 20 us.
pub const DEFAULT_JITTER_MAX_S: f64 = 15.0 * 20e-6;
pub const DEFAULT_PACKETS_PER_CHANNEL: usize = 200;
pub const DEFAULT_START_TIME_S: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("node {node}: {source}")]
    Clock { node: NodeId, source: ClockError },
    #[error("node {node}: {source}")]
    Geometry { node: NodeId, source: GeometryError },
    #[error("node {rx} would report a negative timestamp; raise start_time_s")]
    NegativeTimestamp { rx: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    Blind,
    Pivot,
    Anchor,
    ActiveAnchor,
}

impl NodeRole {
    pub fn receives(self) -> bool {
        matches!(self, NodeRole::Anchor | NodeRole::ActiveAnchor)
    }

    /// Transmitter in known position.
    pub fn is_reference_transmitter(self) -> bool {
        matches!(self, NodeRole::Pivot | NodeRole::ActiveAnchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioNode {
    pub id: NodeId,
    pub role: NodeRole,
    pub position: Position,
    #[serde(default)]
    pub clock: ClockModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Jitter {
    None,
    /// Uniform channel access delay in `[0, max_s]`.
    Uniform { max_s: f64 },
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::Uniform {
            max_s: DEFAULT_JITTER_MAX_S,
        }
    }
}

impl Jitter {
    fn max(&self) -> f64 {
        match *self {
            Jitter::None => 0.0,
            Jitter::Uniform { max_s } => max_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxSchedule {
    #[serde(default = "default_inter_departure")]
    pub inter_departure_s: f64,
    #[serde(default)]
    pub jitter: Jitter,
    #[serde(default = "default_packets")]
    pub packets_per_channel: usize,
}

fn default_inter_departure() -> f64 {
    DEFAULT_INTER_DEPARTURE_S
}
fn default_packets() -> usize {
    DEFAULT_PACKETS_PER_CHANNEL
}
fn default_tick_rate() -> f64 {
    DEFAULT_TICK_RATE_HZ
}
fn default_start() -> f64 {
    DEFAULT_START_TIME_S
}
fn default_channels() -> Vec<ChannelId> {
    vec![1]
}
fn default_version() -> u32 {
    SCENARIO_VERSION
}

impl Default for TxSchedule {
    fn default() -> Self {
        TxSchedule {
            inter_departure_s: DEFAULT_INTER_DEPARTURE_S,
            jitter: Jitter::default(),
            packets_per_channel: DEFAULT_PACKETS_PER_CHANNEL,
        }
    }
}

/// Extra path length on one directed link and channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlosBias {
    pub tx: NodeId,
    pub rx: NodeId,
    pub channel: ChannelId,
    pub meters: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum WrapMode {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "32-bit")]
    Bits32,
}

/// Scenario file (JSON, versioned; schema in the README).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_version")]
    pub version: u32,
    pub nodes: Vec<ScenarioNode>,
    #[serde(default = "default_channels")]
    pub channels: Vec<ChannelId>,
    #[serde(default)]
    pub schedule: TxSchedule,
    #[serde(default)]
    pub nlos_bias: Vec<NlosBias>,
    #[serde(default = "default_tick_rate")]
    pub tick_rate_hz: f64,
    #[serde(default)]
    pub wrap_mode: WrapMode,
    #[serde(default = "default_start")]
    pub start_time_s: f64,
    /// Independent per-reception loss probability.
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn new(nodes: Vec<ScenarioNode>) -> Self {
        Scenario {
            version: SCENARIO_VERSION,
            nodes,
            channels: default_channels(),
            schedule: TxSchedule::default(),
            nlos_bias: Vec::new(),
            tick_rate_hz: DEFAULT_TICK_RATE_HZ,
            wrap_mode: WrapMode::None,
            start_time_s: DEFAULT_START_TIME_S,
            drop_probability: 0.0,
            seed: 0,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&ScenarioNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn blind(&self) -> Option<&ScenarioNode> {
        self.nodes.iter().find(|n| n.role == NodeRole::Blind)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut ScenarioNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Transmitters in slot order: blind first, then known transmitters by id.
    pub fn transmitters(&self) -> Vec<&ScenarioNode> {
        let mut known: Vec<_> = self
            .nodes
            .iter()
            .filter(|n| n.role.is_reference_transmitter())
            .collect();
        known.sort_by_key(|n| n.id);
        self.blind().into_iter().chain(known).collect()
    }

    pub fn receivers(&self) -> Vec<&ScenarioNode> {
        let mut rx: Vec<_> = self.nodes.iter().filter(|n| n.role.receives()).collect();
        rx.sort_by_key(|n| n.id);
        rx
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: String| Err(SimError::Invalid(m));
        if self.version != SCENARIO_VERSION {
            return invalid(format!("unsupported version {}", self.version));
        }
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return invalid(format!("duplicate node id {}", n.id));
            }
            n.position
                .validate()
                .map_err(|source| SimError::Geometry { node: n.id, source })?;
            n.clock
                .validate()
                .map_err(|source| SimError::Clock { node: n.id, source })?;
        }
        let blinds = self.nodes.iter().filter(|n| n.role == NodeRole::Blind).count();
        if blinds != 1 {
            return invalid(format!("expected exactly one blind node, found {blinds}"));
        }
        let rx = self.receivers().len();
        if rx < 3 {
            return invalid(format!("need at least 3 anchors, found {rx}"));
        }
        let tx = self.transmitters().len();
        if tx < 2 {
            return invalid("need a pivot or active anchor in known position".into());
        }
        if self.channels.is_empty() {
            return invalid("no channels".into());
        }
        let chans: HashSet<_> = self.channels.iter().collect();
        if chans.len() != self.channels.len() {
            return invalid("duplicate channel ids".into());
        }
        if !(self.tick_rate_hz > 0.0 && self.tick_rate_hz.is_finite()) {
            return invalid(format!("tick rate {}", self.tick_rate_hz));
        }
        let s = &self.schedule;
        if !(s.inter_departure_s > 0.0 && s.inter_departure_s.is_finite()) {
            return invalid(format!("inter-departure {}", s.inter_departure_s));
        }
        if s.packets_per_channel == 0 {
            return invalid("packets_per_channel must be positive".into());
        }
        let slot = s.inter_departure_s / tx as f64;
        let jmax = s.jitter.max();
        if !(jmax >= 0.0 && jmax < slot) {
            return invalid(format!(
                "access jitter {jmax} s must be non-negative and below the slot width {slot} s"
            ));
        }
        if !(self.start_time_s >= 0.0 && self.start_time_s.is_finite()) {
            return invalid(format!("start time {}", self.start_time_s));
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return invalid(format!("drop probability {}", self.drop_probability));
        }
        for b in &self.nlos_bias {
            if !(b.meters >= 0.0 && b.meters.is_finite()) {
                return invalid(format!("negative or non-finite NLOS bias {}", b.meters));
            }
            if self.node(b.tx).is_none() || self.node(b.rx).is_none() {
                return invalid(format!("NLOS bias references unknown link {}->{}", b.tx, b.rx));
            }
            if !chans.contains(&b.channel) {
                return invalid(format!("NLOS bias on unknown channel {}", b.channel));
            }
        }
        Ok(())
    }
}

/// Ground truth of one logged reception.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptionTruth {
    pub rx: NodeId,
    pub tx: NodeId,
    pub seq: u64,
    pub channel: ChannelId,
    pub tx_time_s: f64,
    pub reception: SplitSeconds,
    /// Realised additive clock noise before any quantisation, seconds.
    pub omega_s: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Full 64-bit timestamps.
    pub log: TimestampLog,
    /// One entry per log row, same order.
    pub truth: Vec<ReceptionTruth>,
    pub wrap_mode: WrapMode,
}

impl SimOutput {
    /// The log as the receivers would report it (wrapped in 32-bit mode).
    pub fn observed_log(&self) -> TimestampLog {
        match self.wrap_mode {
            WrapMode::None => self.log.clone(),
            WrapMode::Bits32 => self.log.wrapped(),
        }
    }
}

pub fn simulate(scenario: &Scenario) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let transmitters = scenario.transmitters();
    let receivers = scenario.receivers();
    let bias: BTreeMap<(NodeId, NodeId, ChannelId), f64> = scenario
        .nlos_bias
        .iter()
        .map(|b| ((b.tx, b.rx, b.channel), b.meters))
        .collect();

    let sched = &scenario.schedule;
    let period = sched.inter_departure_s;
    let slot = period / transmitters.len() as f64;
    let jmax = sched.jitter.max();
    let mut seqs = vec![0u64; transmitters.len()];
    let mut records = Vec::new();
    let mut truth = Vec::new();

    for (ci, &channel) in scenario.channels.iter().enumerate() {
        for cycle in 0..sched.packets_per_channel {
            let cycle_start =
                scenario.start_time_s + (ci * sched.packets_per_channel + cycle) as f64 * period;
            for (q, tx) in transmitters.iter().enumerate() {
                let jitter = if jmax > 0.0 { rng.random::<f64>() * jmax } else { 0.0 };
                let t = cycle_start + q as f64 * slot + jitter;
                let seq = seqs[q];
                seqs[q] += 1;
                for rx in receivers.iter().filter(|r| r.id != tx.id) {
                    if scenario.drop_probability > 0.0
                        && rng.random::<f64>() < scenario.drop_probability
                    {
                        continue;
                    }
                    let extra = bias.get(&(tx.id, rx.id, channel)).copied().unwrap_or(0.0);
                    let flight = (distance(&tx.position, &rx.position) + extra) / SPEED_OF_LIGHT;
                    let reception = SplitSeconds::new(t, flight);
                    let omega = rx.clock.noise.sample(&mut rng);
                    let ticks =
                        rx.clock
                            .timestamp_with_noise(reception, scenario.tick_rate_hz, omega);
                    if ticks.whole() < 0 {
                        return Err(SimError::NegativeTimestamp { rx: rx.id });
                    }
                    records.push(TimestampRecord {
                        rx: rx.id,
                        tx: tx.id,
                        seq,
                        channel,
                        ticks,
                    });
                    truth.push(ReceptionTruth {
                        rx: rx.id,
                        tx: tx.id,
                        seq,
                        channel,
                        tx_time_s: t,
                        reception,
                        omega_s: omega,
                    });
                }
            }
        }
    }
    Ok(SimOutput {
        log: TimestampLog::new(records),
        truth,
        wrap_mode: scenario.wrap_mode,
    })
}
