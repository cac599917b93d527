//! Reference layouts and scenario randomisation used by the experiment
//! runner and the test suites.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{ClockModel, Noise};
use crate::geometry::Position;
use crate::log::NodeId;
use crate::sim::{NlosBias, NodeRole, Scenario, ScenarioNode};

/// Id given to the blind node by the builders below; fixed nodes follow from 1.
pub const BLIND_ID: NodeId = NodeId(0);

/// Six fixed nodes spread over a 16 x 20 m outdoor rectangle.
pub fn garden_layout() -> Vec<Position> {
    vec![
        Position::new(0.0, 0.0),
        Position::new(16.0, 0.5),
        Position::new(15.5, 20.0),
        Position::new(0.5, 19.5),
        Position::new(4.0, 10.0),
        Position::new(12.0, 9.0),
    ]
}

/// Nine fixed nodes: seven in a 20 x 14 m hall and two in side corridors.
pub fn hall_layout() -> Vec<Position> {
    vec![
        Position::new(0.0, 0.0),
        Position::new(10.0, -0.5),
        Position::new(20.0, 0.0),
        Position::new(20.5, 14.0),
        Position::new(10.0, 14.5),
        Position::new(-0.5, 14.0),
        Position::new(7.0, 7.5),
        Position::new(-6.0, 5.0),
        Position::new(26.0, 9.0),
    ]
}

/// Ids of the corridor nodes of [`hall_layout`] when built with the helpers here.
pub fn hall_corridor_ids() -> [NodeId; 2] {
    [NodeId(8), NodeId(9)]
}

/// `n` points uniformly in `[0, side]^2`, pairwise at least `min_sep` apart
/// and not all close to one line.
pub fn random_layout<R: Rng + ?Sized>(n: usize, side: f64, min_sep: f64, rng: &mut R) -> Vec<Position> {
    loop {
        let mut pts: Vec<Position> = Vec::with_capacity(n);
        while pts.len() < n {
            let p = Position::new(rng.random::<f64>() * side, rng.random::<f64>() * side);
            if pts.iter().all(|q| q.sub(&p).norm() >= min_sep) {
                pts.push(p);
            }
        }
        if n < 3 || spread_off_line(&pts) >= min_sep {
            return pts;
        }
    }
}

/// Largest distance of a point from the line through any other two.
fn spread_off_line(pts: &[Position]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            for p in pts {
                best = best.max(distance_to_line(p, a, b));
            }
        }
    }
    best
}

fn distance_to_line(p: &Position, a: &Position, b: &Position) -> f64 {
    let ab = b.sub(a);
    let ap = p.sub(a);
    (ab.x * ap.y - ab.y * ap.x).abs() / ab.norm()
}

pub fn random_point<R: Rng + ?Sized>(min: Position, max: Position, rng: &mut R) -> Position {
    Position::new(
        min.x + rng.random::<f64>() * (max.x - min.x),
        min.y + rng.random::<f64>() * (max.y - min.y),
    )
}

fn fixed_node(i: usize, role: NodeRole, p: Position) -> ScenarioNode {
    ScenarioNode {
        id: NodeId(i as u32 + 1),
        role,
        position: p,
        clock: ClockModel::default(),
    }
}

fn blind_node(p: Position) -> ScenarioNode {
    ScenarioNode {
        id: BLIND_ID,
        role: NodeRole::Blind,
        position: p,
        clock: ClockModel::default(),
    }
}

/// Blind plus fixed nodes, where fixed node `pivot` transmits and the rest listen.
pub fn single_pivot_scenario(fixed: &[Position], pivot: usize, blind: Position) -> Scenario {
    let mut nodes = vec![blind_node(blind)];
    nodes.extend(fixed.iter().enumerate().map(|(i, &p)| {
        let role = if i == pivot { NodeRole::Pivot } else { NodeRole::Anchor };
        fixed_node(i, role, p)
    }));
    Scenario::new(nodes)
}

/// Blind plus fixed nodes that all transmit and receive.
pub fn active_anchor_scenario(fixed: &[Position], blind: Position) -> Scenario {
    let mut nodes = vec![blind_node(blind)];
    nodes.extend(
        fixed
            .iter()
            .enumerate()
            .map(|(i, &p)| fixed_node(i, NodeRole::ActiveAnchor, p)),
    );
    Scenario::new(nodes)
}

/// Spread of per-node clock parameters drawn for each trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockSpread {
    /// Offsets drawn uniformly in `[-alpha_s, alpha_s]`.
    pub alpha_s: f64,
    /// Skews drawn uniformly in `[-beta_ppm, beta_ppm]` parts per million.
    pub beta_ppm: f64,
    pub noise: Noise,
}

impl Default for ClockSpread {
    fn default() -> Self {
        ClockSpread {
            alpha_s: 1.0,
            beta_ppm: 20.0,
            noise: Noise::Quantization,
        }
    }
}

pub fn randomize_clocks<R: Rng + ?Sized>(scenario: &mut Scenario, spread: &ClockSpread, rng: &mut R) {
    for n in &mut scenario.nodes {
        let alpha = (rng.random::<f64>() * 2.0 - 1.0) * spread.alpha_s;
        let beta = (rng.random::<f64>() * 2.0 - 1.0) * spread.beta_ppm * 1e-6;
        n.clock = ClockModel {
            alpha,
            beta,
            drift: n.clock.drift,
            noise: spread.noise,
        };
    }
}

/// Adds an independent excess path in `[min_m, max_m]` on every link touching
/// one of `nlos_nodes`, separately per channel. Both directions of a link
/// share the same excess.
pub fn add_nlos_links<R: Rng + ?Sized>(
    scenario: &mut Scenario,
    nlos_nodes: &[NodeId],
    min_m: f64,
    max_m: f64,
    rng: &mut R,
) {
    let ids: Vec<NodeId> = scenario.nodes.iter().map(|n| n.id).collect();
    for &channel in &scenario.channels.clone() {
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                if !(nlos_nodes.contains(&a) || nlos_nodes.contains(&b)) {
                    continue;
                }
                let meters = min_m + rng.random::<f64>() * (max_m - min_m);
                for (tx, rx) in [(a, b), (b, a)] {
                    scenario.nlos_bias.push(NlosBias {
                        tx,
                        rx,
                        channel,
                        meters,
                    });
                }
            }
        }
    }
}
