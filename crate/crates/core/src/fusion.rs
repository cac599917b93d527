//! Estimation strategies: reference-anchor choice, one-shot solving and
//! Slice & Prune over temporal, spatial and frequency slices, for single-pivot
//! and active-anchor deployments.
//!
//! Every known-position transmitter of the node table yields one [`Instance`]:
//! a single-pivot problem whose receivers are all other anchors. A plain
//! pivot deployment has one instance, an active-anchor deployment of N nodes
//! has N, all sharing the same blind packets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{pair_packets_for, DataError, NodeTable, PairedObservation};
use crate::geometry::{distance, Position};
use crate::log::{ChannelId, NodeId, TimestampLog};
use crate::ranging::{
    quadruplet_stats, DifferentialRangeSet, RangingError, RangingGeometry, RangingOptions,
};
use crate::solvers::{solve, SolveOutcome, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ranging(#[from] RangingError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("slice settings produce no slices")]
    NoSlices,
    #[error("only {got} of {total} slices produced a position, need {needed}")]
    TooFewPoints {
        got: usize,
        needed: usize,
        total: usize,
    },
    #[error("cannot prune an empty point set")]
    EmptyPrune,
    #[error("solver did not converge")]
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefAnchorStrategy {
    /// Anchor nearest to the pivot.
    #[default]
    Near,
    /// Anchor farthest from the pivot.
    Far,
    /// Average of the solutions for every choice of reference.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    OneShot,
    Snp,
}

/// How the measurements are partitioned for Slice & Prune.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    /// Packet pairs per temporal block. `None` keeps each channel whole.
    /// A channel of `B` pairs yields `max(1, B / len)` blocks; leftover
    /// pairs go to the last block.
    pub block_len: Option<usize>,
    /// Enumerate every anchor subset of size 3 or more.
    pub spatial: bool,
    /// Solve each channel separately.
    pub frequency: bool,
}

impl SliceSpec {
    /// One slice holding everything.
    pub const WHOLE: SliceSpec = SliceSpec {
        block_len: None,
        spatial: false,
        frequency: false,
    };

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.block_len == Some(0) {
            return Err(FusionError::Config("block length must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SliceSpec {
    fn default() -> Self {
        SliceSpec {
            block_len: Some(20),
            spatial: true,
            frequency: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of points kept, rounded up.
    pub l_min_fraction: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { l_min_fraction: 0.5 }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.l_min_fraction > 0.0 && self.l_min_fraction <= 1.0) {
            return Err(FusionError::Config(format!(
                "prune fraction {} outside (0, 1]",
                self.l_min_fraction
            )));
        }
        Ok(())
    }

    pub fn survivors(&self, n: usize) -> usize {
        ((n as f64 * self.l_min_fraction).ceil() as usize).clamp(1, n.max(1))
    }
}

/// Slice & Prune needs this many surviving slice points (fewer only when
/// fewer slices exist at all).
pub const MIN_SNP_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub method: Method,
    pub strategy: RefAnchorStrategy,
    pub solver: SolverConfig,
    pub slices: SliceSpec,
    pub prune: PruneConfig,
    pub ranging: RangingOptions,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            method: Method::OneShot,
            strategy: RefAnchorStrategy::Near,
            solver: SolverConfig::default(),
            slices: SliceSpec::default(),
            prune: PruneConfig::default(),
            ranging: RangingOptions::default(),
        }
    }
}

/// Single-pivot problem: pivot, its receivers and the paired observations.
#[derive(Debug, Clone)]
pub struct Instance {
    pub pivot: NodeId,
    /// Receivers, sorted by id.
    pub anchors: Vec<NodeId>,
    pub geometry: RangingGeometry,
    /// All channels, each in pair order.
    pub observations: Vec<PairedObservation>,
}

impl Instance {
    /// Pairs the blind packets with `pivot`'s on each of `channels`. Channels
    /// without any pair are skipped.
    pub fn build(
        log: &TimestampLog,
        nodes: &NodeTable,
        pivot: NodeId,
        channels: &[ChannelId],
    ) -> Result<Instance, FusionError> {
        let blind = nodes
            .blind()
            .ok_or_else(|| DataError::Nodes("no blind node".into()))?;
        let pivot_position = nodes
            .position(pivot)
            .ok_or_else(|| DataError::Nodes(format!("pivot {pivot} has no position")))?;
        let anchors: Vec<NodeId> = nodes.receivers().into_iter().filter(|&a| a != pivot).collect();
        if anchors.len() < 3 {
            return Err(DataError::Nodes(format!(
                "pivot {pivot} has {} receiving anchors, need 3",
                anchors.len()
            ))
            .into());
        }
        let mut positions = BTreeMap::new();
        for &a in &anchors {
            let p = nodes
                .position(a)
                .ok_or_else(|| DataError::Nodes(format!("anchor {a} has no position")))?;
            positions.insert(a, p);
        }
        let mut observations = Vec::new();
        for &ch in channels {
            match pair_packets_for(log, blind, pivot, &anchors, ch) {
                Ok(o) => observations.extend(o),
                Err(DataError::NoPairs { .. }) => {
                    log::warn!("pivot {pivot}: no packet pairs on channel {ch}");
                }
                Err(e) => return Err(e.into()),
            }
        }
        if observations.is_empty() {
            return Err(DataError::NoPairs {
                channel: channels.first().copied().unwrap_or_default(),
            }
            .into());
        }
        Ok(Instance {
            pivot,
            anchors,
            geometry: RangingGeometry {
                tick_rate_hz: nodes.tick_rate_hz,
                pivot: pivot_position,
                positions,
            },
            observations,
        })
    }

    pub fn channels(&self) -> Vec<ChannelId> {
        let mut c: Vec<_> = self.observations.iter().map(|o| o.channel).collect();
        c.dedup();
        c.sort_unstable();
        c.dedup();
        c
    }

    fn reference_for(&self, subset: &[NodeId], strategy: RefAnchorStrategy) -> Vec<NodeId> {
        let d = |a: &NodeId| distance(&self.geometry.pivot, &self.geometry.positions[a]);
        let pick = |far: bool| {
            let mut best = subset[0];
            for &a in &subset[1..] {
                let better = if far { d(&a) > d(&best) } else { d(&a) < d(&best) };
                if better {
                    best = a;
                }
            }
            best
        };
        match strategy {
            RefAnchorStrategy::Near => vec![pick(false)],
            RefAnchorStrategy::Far => vec![pick(true)],
            RefAnchorStrategy::Mean => subset.to_vec(),
        }
    }
}

/// One instance per transmitter in known position (pivot or active anchor).
pub fn instances(
    log: &TimestampLog,
    nodes: &NodeTable,
    channels: &[ChannelId],
) -> Result<Vec<Instance>, FusionError> {
    let mut pivots = nodes.pivots();
    pivots.extend(nodes.active_anchors());
    pivots.sort_unstable();
    pivots
        .into_iter()
        .map(|p| Instance::build(log, nodes, p, channels))
        .collect()
}

/// Active-anchor overlay: each active anchor in turn acts as pivot for the
/// other receivers.
pub fn active_anchor_decompose(
    log: &TimestampLog,
    nodes: &NodeTable,
    channels: &[ChannelId],
) -> Result<Vec<Instance>, FusionError> {
    let active = nodes.active_anchors();
    if active.len() < 2 {
        return Err(DataError::Nodes(format!("need 2 active anchors, found {}", active.len())).into());
    }
    active
        .into_iter()
        .map(|p| Instance::build(log, nodes, p, channels))
        .collect()
}

/// Every subset of `anchors` with at least 3 members, by size then
/// lexicographically.
pub fn spatial_subsets(anchors: &[NodeId]) -> Vec<Vec<NodeId>> {
    let n = anchors.len();
    let mut out = Vec::new();
    for size in 3..=n {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.iter().map(|&i| anchors[i]).collect());
            let Some(pos) = (0..size).rev().find(|&i| idx[i] != i + n - size) else {
                break;
            };
            idx[pos] += 1;
            for j in pos + 1..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

/// Identifies one slice of one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SliceDef {
    pub instance: usize,
    /// `None` when the whole channel is used.
    pub block: Option<usize>,
    /// `None` when channels are pooled.
    pub channel: Option<ChannelId>,
    pub anchors: Vec<NodeId>,
}

fn block_count(pairs: usize, block_len: Option<usize>) -> usize {
    match block_len {
        None => 1,
        Some(m) => (pairs / m).max(1),
    }
}

fn block_of(index: usize, pairs: usize, block_len: Option<usize>) -> usize {
    match block_len {
        None => 0,
        Some(m) => (index / m).min(block_count(pairs, block_len) - 1),
    }
}

fn pairs_per_channel(inst: &Instance) -> BTreeMap<ChannelId, usize> {
    let mut n = BTreeMap::new();
    for o in &inst.observations {
        *n.entry(o.channel).or_insert(0) += 1;
    }
    n
}

/// Cross product of temporal blocks, anchor subsets and channels, instance by
/// instance. With pooled channels the number of blocks is that of the
/// shortest channel.
pub fn enumerate_slices(spec: &SliceSpec, instances: &[Instance]) -> Result<Vec<SliceDef>, FusionError> {
    spec.validate()?;
    let mut out = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let counts = pairs_per_channel(inst);
        let subsets = if spec.spatial {
            spatial_subsets(&inst.anchors)
        } else {
            vec![inst.anchors.clone()]
        };
        let groups: Vec<(Option<ChannelId>, usize)> = if spec.frequency {
            counts
                .iter()
                .map(|(&c, &n)| (Some(c), block_count(n, spec.block_len)))
                .collect()
        } else {
            let shortest = counts.values().copied().min().unwrap_or(0);
            vec![(None, block_count(shortest, spec.block_len))]
        };
        for (channel, blocks) in groups {
            for b in 0..blocks {
                for s in &subsets {
                    out.push(SliceDef {
                        instance: i,
                        block: spec.block_len.map(|_| b),
                        channel,
                        anchors: s.clone(),
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(FusionError::NoSlices);
    }
    Ok(out)
}

/// `(block, channel, mean ticks, count)`
type Cell = (usize, ChannelId, f64, usize);

/// Averaged double differences per (block, channel) and ordered anchor pair.
struct PairTable {
    /// Keyed by `(reference, anchor)`.
    cells: BTreeMap<(NodeId, NodeId), Vec<Cell>>,
}

impl PairTable {
    fn build(inst: &Instance, block_len: Option<usize>, opts: &RangingOptions) -> PairTable {
        let counts = pairs_per_channel(inst);
        let mut groups: BTreeMap<(usize, ChannelId), Vec<&PairedObservation>> = BTreeMap::new();
        for o in &inst.observations {
            let b = block_of(o.index, counts[&o.channel], block_len);
            groups.entry((b, o.channel)).or_default().push(o);
        }
        let mut cells: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for ((b, ch), obs) in &groups {
            for &r in &inst.anchors {
                for &k in &inst.anchors {
                    if r == k {
                        continue;
                    }
                    match quadruplet_stats(obs.iter().copied(), r, k, opts) {
                        Ok(st) => {
                            cells.entry((r, k)).or_default().push((*b, *ch, st.mean_ticks, st.count));
                        }
                        Err(e) => log::debug!("pivot {}: block {b} channel {ch}: {e}", inst.pivot),
                    }
                }
            }
        }
        PairTable { cells }
    }

    /// Mean over the selected block (all blocks when `None`) and channel
    /// (all channels when `None`), weighted by pair count.
    fn mean(&self, block: Option<usize>, channel: Option<ChannelId>, r: NodeId, k: NodeId) -> Option<(f64, usize)> {
        let (mut sum, mut n) = (0.0, 0usize);
        for &(b, ch, m, c) in self.cells.get(&(r, k))?.iter() {
            if block.is_none_or(|x| x == b) && channel.is_none_or(|x| x == ch) {
                sum += m * c as f64;
                n += c;
            }
        }
        (n > 0).then(|| (sum / n as f64, n))
    }
}

fn range_set(
    inst: &Instance,
    table: &PairTable,
    block: Option<usize>,
    channel: Option<ChannelId>,
    subset: &[NodeId],
    reference: NodeId,
) -> Result<DifferentialRangeSet, RangingError> {
    let entries = subset
        .iter()
        .filter(|&&k| k != reference)
        .map(|&k| {
            let (mean, count) = table.mean(block, channel, reference, k).ok_or(RangingError::TooFewPoints {
                reference,
                anchor: k,
                found: 0,
            })?;
            inst.geometry.range_entry(reference, k, mean, count)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DifferentialRangeSet {
        reference,
        reference_position: inst.geometry.position(reference)?,
        entries,
    })
}

/// Position for one (instance, data selection, anchor subset), averaging over
/// references for the `Mean` strategy. Non-converged solves are dropped.
fn solve_slice(
    inst: &Instance,
    table: &PairTable,
    block: Option<usize>,
    channel: Option<ChannelId>,
    subset: &[NodeId],
    strategy: RefAnchorStrategy,
    solver: &SolverConfig,
) -> Result<(Position, Vec<DifferentialRangeSet>), FusionError> {
    let mut points = Vec::new();
    let mut sets = Vec::new();
    let mut last_err = None;
    for r in inst.reference_for(subset, strategy) {
        let set = range_set(inst, table, block, channel, subset, r)?;
        match solve(&set, solver) {
            Ok(SolveOutcome {
                converged: true,
                position,
                ..
            }) => points.push(position),
            Ok(_) => last_err = Some(FusionError::NotConverged),
            Err(e) => last_err = Some(e.into()),
        }
        sets.push(set);
    }
    match Position::mean(&points) {
        Some(p) => Ok((p, sets)),
        None => Err(last_err.unwrap_or(FusionError::NotConverged)),
    }
}

/// Removes the point farthest from the mean of the remaining ones until
/// `config.survivors(len)` are left; returns the survivors' indices in input
/// order. Ties go to the lowest index; two points always tie, so pruning a
/// pair keeps the second one.
pub fn prune_indices(points: &[Position], config: &PruneConfig) -> Result<Vec<usize>, FusionError> {
    config.validate()?;
    if points.is_empty() {
        return Err(FusionError::EmptyPrune);
    }
    let target = config.survivors(points.len());
    let mut alive: Vec<usize> = (0..points.len()).collect();
    while alive.len() > target {
        let mean = Position::mean(alive.iter().map(|&i| &points[i])).expect("nonempty");
        let mut worst = 0;
        let mut worst_d = -1.0;
        for (slot, &i) in alive.iter().enumerate() {
            let d = distance(&points[i], &mean);
            if d > worst_d {
                worst = slot;
                worst_d = d;
            }
        }
        alive.remove(worst);
    }
    Ok(alive)
}

pub fn prune(points: &[Position], config: &PruneConfig) -> Result<Position, FusionError> {
    let keep = prune_indices(points, config)?;
    Ok(Position::mean(keep.iter().map(|&i| &points[i])).expect("nonempty"))
}

/// One slice outcome, for diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct SliceRecord {
    pub slice: SliceDef,
    pub pivot: NodeId,
    pub position: Option<Position>,
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationResult {
    pub position: Position,
    pub method: Method,
    /// Points that entered the final average.
    pub survivors: usize,
    pub slices: Vec<SliceRecord>,
    /// Differential ranges behind each solve (one-shot only).
    #[serde(skip)]
    pub ranges: Vec<DifferentialRangeSet>,
}

impl EstimationResult {
    pub fn converged_slices(&self) -> usize {
        self.slices.iter().filter(|s| s.position.is_some()).count()
    }
}

/// Solves every instance once on all its data and averages the instance
/// positions without pruning. Instances whose solve fails are left out; the
/// first failure is returned if none succeeds.
pub fn estimate_one_shot(
    instances: &[Instance],
    strategy: RefAnchorStrategy,
    solver: &SolverConfig,
    ranging: &RangingOptions,
) -> Result<EstimationResult, FusionError> {
    if instances.is_empty() {
        return Err(FusionError::NoSlices);
    }
    let solved: Vec<_> = instances
        .par_iter()
        .map(|inst| {
            let table = PairTable::build(inst, None, ranging);
            solve_slice(inst, &table, None, None, &inst.anchors, strategy, solver)
        })
        .collect();
    let mut points = Vec::new();
    let mut ranges = Vec::new();
    let mut slices = Vec::new();
    let mut first_err = None;
    for (i, r) in solved.into_iter().enumerate() {
        let position = match r {
            Ok((p, sets)) => {
                for s in &sets {
                    s.warn_implausible();
                }
                points.push(p);
                ranges.extend(sets);
                Some(p)
            }
            Err(e) => {
                log::warn!("instance with pivot {}: {e}", instances[i].pivot);
                first_err.get_or_insert(e);
                None
            }
        };
        slices.push(SliceRecord {
            slice: SliceDef {
                instance: i,
                block: None,
                channel: None,
                anchors: instances[i].anchors.clone(),
            },
            pivot: instances[i].pivot,
            position,
            kept: position.is_some(),
        });
    }
    if points.is_empty() {
        return Err(first_err.expect("nonempty instances"));
    }
    Ok(EstimationResult {
        position: Position::mean(&points).expect("nonempty"),
        method: Method::OneShot,
        survivors: points.len(),
        slices,
        ranges,
    })
}

/// Slice & Prune: solves every slice of every instance, prunes the pooled
/// points and returns the survivors' mean.
pub fn estimate_snp(
    instances: &[Instance],
    spec: &SliceSpec,
    strategy: RefAnchorStrategy,
    solver: &SolverConfig,
    prune_cfg: &PruneConfig,
    ranging: &RangingOptions,
) -> Result<EstimationResult, FusionError> {
    prune_cfg.validate()?;
    let defs = enumerate_slices(spec, instances)?;
    let tables: Vec<PairTable> = instances
        .par_iter()
        .map(|inst| PairTable::build(inst, spec.block_len, ranging))
        .collect();
    let points: Vec<Option<Position>> = defs
        .par_iter()
        .map(|d| {
            let inst = &instances[d.instance];
            solve_slice(inst, &tables[d.instance], d.block, d.channel, &d.anchors, strategy, solver)
                .map(|(p, _)| p)
                .map_err(|e| log::debug!("slice {d:?}: {e}"))
                .ok()
        })
        .collect();
    let (idx, good): (Vec<usize>, Vec<Position>) = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .unzip();
    let needed = MIN_SNP_POINTS.min(defs.len());
    if good.len() < needed {
        return Err(FusionError::TooFewPoints {
            got: good.len(),
            needed,
            total: defs.len(),
        });
    }
    let keep = prune_indices(&good, prune_cfg)?;
    let position = Position::mean(keep.iter().map(|&i| &good[i])).expect("nonempty");
    let mut kept = vec![false; defs.len()];
    for &k in &keep {
        kept[idx[k]] = true;
    }
    let slices = defs
        .into_iter()
        .zip(points)
        .zip(kept)
        .map(|((slice, position), kept)| SliceRecord {
            pivot: instances[slice.instance].pivot,
            slice,
            position,
            kept,
        })
        .collect();
    Ok(EstimationResult {
        position,
        method: Method::Snp,
        survivors: keep.len(),
        slices,
        ranges: Vec::new(),
    })
}

pub fn estimate(instances: &[Instance], cfg: &EstimationConfig) -> Result<EstimationResult, FusionError> {
    cfg.solver.validate()?;
    match cfg.method {
        Method::OneShot => estimate_one_shot(instances, cfg.strategy, &cfg.solver, &cfg.ranging),
        Method::Snp => estimate_snp(
            instances,
            &cfg.slices,
            cfg.strategy,
            &cfg.solver,
            &cfg.prune,
            &cfg.ranging,
        ),
    }
}
