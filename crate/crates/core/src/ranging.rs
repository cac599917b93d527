//! Differential ranging: inter-anchor frequency ratios, skew-corrected
//! double differences of timestamps, block averages and differential ranges.
//!
//! All timestamp arithmetic stays in ticks until the final conversion to
//! meters. The frequency ratio is carried as its excess over one so that
//! rescaling a timestamp difference only ever multiplies a small number.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{AnchorEntry, PairedObservation};
use crate::geometry::{diff_range, distance, Position, SPEED_OF_LIGHT};
use crate::log::{ChannelId, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RangingError {
    #[error("anchors {reference} and {anchor}: need at least 2 regression points, found {found}")]
    TooFewPoints {
        reference: NodeId,
        anchor: NodeId,
        found: usize,
    },
    #[error("anchors {reference} and {anchor}: regressor has zero variance")]
    ZeroVariance { reference: NodeId, anchor: NodeId },
    #[error("observation {index} lacks anchor {anchor}")]
    Incomplete { index: usize, anchor: NodeId },
    #[error("cannot average an empty set of double differences")]
    Empty,
    #[error("need at least 2 anchors besides the reference, got {0}")]
    TooFewAnchors(usize),
    #[error("no position for node {0}")]
    MissingPosition(NodeId),
    #[error("reference anchor {0} also listed as a non-reference anchor")]
    ReferenceRepeated(NodeId),
}

/// Regression estimate of `(1 + beta_ref) / (1 + beta_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaEstimate {
    pub reference: NodeId,
    pub anchor: NodeId,
    /// `gamma_hat - 1`.
    pub excess: f64,
    pub points: usize,
    pub residual_rms_ticks: f64,
}

impl GammaEstimate {
    pub fn gamma(&self) -> f64 {
        1.0 + self.excess
    }

    /// A ratio of exactly one, i.e. no skew correction.
    pub fn unity(reference: NodeId, anchor: NodeId) -> Self {
        GammaEstimate {
            reference,
            anchor,
            excess: 0.0,
            points: 0,
            residual_rms_ticks: 0.0,
        }
    }
}

fn both(o: &PairedObservation, reference: NodeId, anchor: NodeId) -> Option<(&AnchorEntry, &AnchorEntry)> {
    Some((o.entry(reference)?, o.entry(anchor)?))
}

/// Ordinary least-squares slope of the reference anchor's pivot timestamps
/// regressed on anchor `anchor`'s, over every observation holding both.
pub fn estimate_gamma(
    obs: &[PairedObservation],
    reference: NodeId,
    anchor: NodeId,
) -> Result<GammaEstimate, RangingError> {
    let pairs: Vec<_> = obs.iter().filter_map(|o| both(o, reference, anchor)).collect();
    fit_gamma(&pairs, reference, anchor)
}

/// Timestamps are re-based to the first pair, and the slope is computed for
/// `y - x` against `x`, which yields `gamma_hat - 1` directly.
fn fit_gamma(
    pairs: &[(&AnchorEntry, &AnchorEntry)],
    reference: NodeId,
    anchor: NodeId,
) -> Result<GammaEstimate, RangingError> {
    if pairs.len() < 2 {
        return Err(RangingError::TooFewPoints {
            reference,
            anchor,
            found: pairs.len(),
        });
    }
    let (r0, k0) = pairs[0];
    let (xs, zs): (Vec<f64>, Vec<f64>) = pairs
        .iter()
        .map(|(r, k)| {
            let y = r.pivot.since(&r0.pivot);
            let x = k.pivot.since(&k0.pivot);
            let z = (y.whole - x.whole) as f64 + (y.frac - x.frac);
            (x.as_f64(), z)
        })
        .unzip();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let mz = zs.iter().sum::<f64>() / n;
    let (mut sxx, mut sxz) = (0.0, 0.0);
    for (x, z) in xs.iter().zip(&zs) {
        sxx += (x - mx) * (x - mx);
        sxz += (x - mx) * (z - mz);
    }
    if !(sxx > 0.0) {
        return Err(RangingError::ZeroVariance { reference, anchor });
    }
    let excess = sxz / sxx;
    let ss: f64 = xs
        .iter()
        .zip(&zs)
        .map(|(x, z)| {
            let e = z - mz - excess * (x - mx);
            e * e
        })
        .sum();
    Ok(GammaEstimate {
        reference,
        anchor,
        excess,
        points: xs.len(),
        residual_rms_ticks: (ss / n).sqrt(),
    })
}

/// Skew-corrected double difference for one packet pair, in ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleDifference {
    pub pair_index: usize,
    pub channel: ChannelId,
    pub anchor: NodeId,
    pub s_hat: f64,
}

/// `(s_pivot,ref - s_blind,ref) - gamma * (s_pivot,k - s_blind,k)`.
pub fn double_difference(
    obs: &PairedObservation,
    reference: NodeId,
    anchor: NodeId,
    gamma: &GammaEstimate,
) -> Result<DoubleDifference, RangingError> {
    let missing = |a| RangingError::Incomplete {
        index: obs.index,
        anchor: a,
    };
    let r = obs.entry(reference).ok_or_else(|| missing(reference))?;
    let k = obs.entry(anchor).ok_or_else(|| missing(anchor))?;
    Ok(DoubleDifference {
        pair_index: obs.index,
        channel: obs.channel,
        anchor,
        s_hat: double_difference_ticks(r, k, gamma.excess),
    })
}

fn double_difference_ticks(r: &AnchorEntry, k: &AnchorEntry, excess: f64) -> f64 {
    let d1 = r.pivot.since(&r.blind);
    let dk = k.pivot.since(&k.blind);
    // d1 - (1 + e) dk = (d1 - dk) - e dk
    (d1.whole - dk.whole) as f64 + (d1.frac - dk.frac) - excess * dk.as_f64()
}

/// Mean of a block of double differences and its size.
pub fn average_block(dds: &[DoubleDifference]) -> Result<(f64, usize), RangingError> {
    if dds.is_empty() {
        return Err(RangingError::Empty);
    }
    let sum: f64 = dds.iter().map(|d| d.s_hat).sum();
    Ok((sum / dds.len() as f64, dds.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangingOptions {
    /// When false the frequency ratio is forced to one.
    pub skew_correction: bool,
}

impl Default for RangingOptions {
    fn default() -> Self {
        RangingOptions {
            skew_correction: true,
        }
    }
}

/// Averaged double difference of one (reference, anchor) pair over a set of
/// observations, possibly spanning several channels.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrupletStats {
    pub reference: NodeId,
    pub anchor: NodeId,
    pub mean_ticks: f64,
    pub count: usize,
    /// One estimate per channel, ascending channel order.
    pub gammas: Vec<(ChannelId, GammaEstimate)>,
}

/// Frequency ratios are fitted per channel (each channel is a separate block
/// in time); the double differences of all channels are then averaged together.
pub fn quadruplet_stats<'a, I>(
    obs: I,
    reference: NodeId,
    anchor: NodeId,
    opts: &RangingOptions,
) -> Result<QuadrupletStats, RangingError>
where
    I: IntoIterator<Item = &'a PairedObservation>,
{
    let mut by_channel: BTreeMap<ChannelId, Vec<(&AnchorEntry, &AnchorEntry)>> = BTreeMap::new();
    for o in obs {
        if let Some(p) = both(o, reference, anchor) {
            by_channel.entry(o.channel).or_default().push(p);
        }
    }
    let mut gammas = Vec::with_capacity(by_channel.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (channel, pairs) in by_channel {
        let gamma = if opts.skew_correction {
            fit_gamma(&pairs, reference, anchor)?
        } else {
            GammaEstimate::unity(reference, anchor)
        };
        for (r, k) in &pairs {
            sum += double_difference_ticks(r, k, gamma.excess);
        }
        count += pairs.len();
        gammas.push((channel, gamma));
    }
    if count == 0 {
        return Err(RangingError::TooFewPoints {
            reference,
            anchor,
            found: 0,
        });
    }
    Ok(QuadrupletStats {
        reference,
        anchor,
        mean_ticks: sum / count as f64,
        count,
        gammas,
    })
}

/// Allowance over the anchor baseline before a differential range is flagged.
pub const IMPLAUSIBLE_SLACK_M: f64 = 10.0;

/// Differential range estimate for one non-reference anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeEntry {
    pub anchor: NodeId,
    pub position: Position,
    /// Estimated `|p - p_k| - |p - p_ref|`, meters.
    pub delta_m: f64,
    /// Pivot-side differential range, meters.
    pub pivot_delta_m: f64,
    pub mean_ticks: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialRangeSet {
    pub reference: NodeId,
    pub reference_position: Position,
    pub entries: Vec<RangeEntry>,
}

impl DifferentialRangeSet {
    pub fn anchor_positions(&self) -> impl Iterator<Item = Position> + '_ {
        std::iter::once(self.reference_position).chain(self.entries.iter().map(|e| e.position))
    }

    pub fn warn_implausible(&self) {
        let odd = self.implausible(IMPLAUSIBLE_SLACK_M);
        if !odd.is_empty() {
            log::warn!("differential ranges beyond anchor baseline for anchors {odd:?}");
        }
    }

    /// Entries whose magnitude exceeds the anchor baseline by more than `slack_m`.
    pub fn implausible(&self, slack_m: f64) -> Vec<NodeId> {
        self.entries
            .iter()
            .filter(|e| e.delta_m.abs() > distance(&e.position, &self.reference_position) + slack_m)
            .map(|e| e.anchor)
            .collect()
    }
}

/// Known geometry the ranging stage needs.
#[derive(Debug, Clone)]
pub struct RangingGeometry {
    pub tick_rate_hz: f64,
    pub pivot: Position,
    pub positions: BTreeMap<NodeId, Position>,
}

impl RangingGeometry {
    pub fn position(&self, id: NodeId) -> Result<Position, RangingError> {
        self.positions
            .get(&id)
            .copied()
            .ok_or(RangingError::MissingPosition(id))
    }

    /// Combines an averaged double difference with the pivot geometry:
    /// `delta_k = pivot_delta_k + c * mean / f`.
    pub fn range_entry(
        &self,
        reference: NodeId,
        anchor: NodeId,
        mean_ticks: f64,
        count: usize,
    ) -> Result<RangeEntry, RangingError> {
        let pr = self.position(reference)?;
        let pk = self.position(anchor)?;
        let pivot_delta_m = diff_range(&self.pivot, &pk, &pr);
        Ok(RangeEntry {
            anchor,
            position: pk,
            delta_m: pivot_delta_m + SPEED_OF_LIGHT * mean_ticks / self.tick_rate_hz,
            pivot_delta_m,
            mean_ticks,
            count,
        })
    }
}

/// Full ranging stage for one reference anchor and a set of other anchors.
pub fn differential_ranges(
    obs: &[PairedObservation],
    geometry: &RangingGeometry,
    reference: NodeId,
    anchors: &[NodeId],
    opts: &RangingOptions,
) -> Result<DifferentialRangeSet, RangingError> {
    let others: Vec<NodeId> = anchors.iter().copied().filter(|&a| a != reference).collect();
    if others.len() != anchors.len() {
        return Err(RangingError::ReferenceRepeated(reference));
    }
    if others.len() < 2 {
        return Err(RangingError::TooFewAnchors(others.len()));
    }
    let reference_position = geometry.position(reference)?;
    let entries = others
        .iter()
        .map(|&k| {
            let st = quadruplet_stats(obs, reference, k, opts)?;
            geometry.range_entry(reference, k, st.mean_ticks, st.count)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let set = DifferentialRangeSet {
        reference,
        reference_position,
        entries,
    };
    set.warn_implausible();
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timestamp::Ticks;

    fn entry(anchor: u32, blind: f64, pivot: f64) -> AnchorEntry {
        AnchorEntry {
            anchor: NodeId(anchor),
            blind: Ticks::from_parts(0, blind),
            pivot: Ticks::from_parts(0, pivot),
        }
    }

    fn obs(index: usize, entries: Vec<AnchorEntry>) -> PairedObservation {
        PairedObservation {
            index,
            channel: 1,
            blind_seq: index as u64,
            pivot_seq: index as u64,
            complete: true,
            entries,
        }
    }

    /// Noiseless pivot timestamps: reference clock at rate `(1 + b1)`,
    /// anchor at `(1 + bk)`, pivot packets every 1000 ticks.
    fn skewed_block(b1: f64, bk: f64, n: usize) -> Vec<PairedObservation> {
        (0..n)
            .map(|j| {
                let t = 1000.0 * j as f64;
                obs(
                    j,
                    vec![
                        entry(1, (1.0 + b1) * (t - 300.0) + 5.0, (1.0 + b1) * t + 5.0),
                        entry(2, (1.0 + bk) * (t - 300.0) - 7.0, (1.0 + bk) * t - 7.0),
                    ],
                )
            })
            .collect()
    }

    #[test]
    fn identical_clocks_give_unit_gamma() {
        let g = estimate_gamma(&skewed_block(3e-6, 3e-6, 50), NodeId(1), NodeId(2)).unwrap();
        assert!(g.excess.abs() < 1e-15);
        assert_eq!(g.points, 50);
    }

    #[test]
    fn analytic_slope() {
        let g = estimate_gamma(&skewed_block(0.0, 1e-5, 50), NodeId(1), NodeId(2)).unwrap();
        let expected = 1.0 / (1.0 + 1e-5);
        assert!((g.gamma() - expected).abs() < 1e-15);
        assert!(g.residual_rms_ticks < 1e-9);
    }

    #[test]
    fn gamma_errors() {
        let one = skewed_block(0.0, 0.0, 1);
        assert!(matches!(
            estimate_gamma(&one, NodeId(1), NodeId(2)),
            Err(RangingError::TooFewPoints { found: 1, .. })
        ));
        let flat: Vec<_> = (0..3).map(|i| obs(i, vec![entry(1, 0.0, 5.0), entry(2, 0.0, 5.0)])).collect();
        assert!(matches!(
            estimate_gamma(&flat, NodeId(1), NodeId(2)),
            Err(RangingError::ZeroVariance { .. })
        ));
    }

    #[test]
    fn double_difference_offset_cancellation() {
        let o = obs(0, vec![entry(1, 100.0, 400.0), entry(2, 50.0, 352.5)]);
        let g = GammaEstimate::unity(NodeId(1), NodeId(2));
        let base = double_difference(&o, NodeId(1), NodeId(2), &g).unwrap().s_hat;
        assert_eq!(base, 300.0 - 302.5);
        let mut shifted = o.clone();
        for e in &mut shifted.entries {
            if e.anchor == NodeId(2) {
                e.blind = e.blind.offset_whole(123_456_789);
                e.pivot = e.pivot.offset_whole(123_456_789);
            }
        }
        assert_eq!(double_difference(&shifted, NodeId(1), NodeId(2), &g).unwrap().s_hat, base);
    }

    #[test]
    fn double_difference_needs_both_anchors() {
        let o = obs(4, vec![entry(1, 0.0, 1.0)]);
        let g = GammaEstimate::unity(NodeId(1), NodeId(2));
        assert!(matches!(
            double_difference(&o, NodeId(1), NodeId(2), &g),
            Err(RangingError::Incomplete { index: 4, .. })
        ));
    }

    #[test]
    fn average_examples() {
        let dd = |v| DoubleDifference {
            pair_index: 0,
            channel: 1,
            anchor: NodeId(2),
            s_hat: v,
        };
        assert_eq!(average_block(&[dd(2.5)]).unwrap(), (2.5, 1));
        assert_eq!(average_block(&[dd(0.75), dd(-0.75)]).unwrap(), (0.0, 2));
        assert_eq!(average_block(&[]), Err(RangingError::Empty));
    }

    #[test]
    fn ranges_reject_degenerate_anchor_lists() {
        let geo = RangingGeometry {
            tick_rate_hz: 22e6,
            pivot: Position::default(),
            positions: BTreeMap::new(),
        };
        let opts = RangingOptions::default();
        assert_eq!(
            differential_ranges(&[], &geo, NodeId(1), &[NodeId(2)], &opts),
            Err(RangingError::TooFewAnchors(1))
        );
        assert_eq!(
            differential_ranges(&[], &geo, NodeId(1), &[NodeId(1), NodeId(2), NodeId(3)], &opts),
            Err(RangingError::ReferenceRepeated(NodeId(1)))
        );
    }
}
