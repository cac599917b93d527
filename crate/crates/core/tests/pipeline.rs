use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtdoa::clock::{ClockModel, SplitSeconds};
use dtdoa::dataio::{pair_packets, NodeTable};
use dtdoa::eval::{estimate_scenario, position_error};
use dtdoa::fusion::{
    estimate, estimate_one_shot, instances, EstimationConfig, Method, RefAnchorStrategy, SliceSpec,
};
use dtdoa::geometry::Position;
use dtdoa::log::NodeId;
use dtdoa::presets::{active_anchor_scenario, garden_layout, hall_layout, single_pivot_scenario};
use dtdoa::ranging::{double_difference, GammaEstimate, RangingOptions};
use dtdoa::sim::{simulate, NodeRole, Scenario, WrapMode};
use dtdoa::solvers::{SolverConfig, SolverMethod};

/// Offsets everywhere, skews only on nodes that never act as reference
/// anchor, so the noiseless pipeline is exact.
fn offset_clocks(s: &mut Scenario, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in &mut s.nodes {
        let beta = if n.role.receives() { 0.0 } else { rng.random_range(-20e-6..20e-6) };
        n.clock = ClockModel::ideal().with_offset(rng.random_range(-1.0..1.0), beta);
    }
}

fn seconds_between(later: SplitSeconds, earlier: SplitSeconds) -> f64 {
    (later.hi - earlier.hi) + (later.lo - earlier.lo)
}

#[test]
fn double_difference_matches_reception_truth() {
    let mut s = single_pivot_scenario(&garden_layout(), 0, Position::new(5.0, 13.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in &mut s.nodes {
        n.clock = ClockModel::ideal().with_offset(rng.random_range(-1.0..1.0), rng.random_range(-40e-6..40e-6));
    }
    let out = simulate(&s).unwrap();
    let truth: HashMap<_, _> = out
        .truth
        .iter()
        .map(|t| ((t.rx, t.tx, t.seq, t.channel), t.reception))
        .collect();
    let obs = pair_packets(&out.log, &NodeTable::from_scenario(&s), 1).unwrap();
    assert_eq!(obs.len(), s.schedule.packets_per_channel);
    let (blind, pivot) = (NodeId(0), NodeId(1));
    let (r, k) = (NodeId(3), NodeId(5));
    let (b1, bk) = (s.node(r).unwrap().clock.beta, s.node(k).unwrap().clock.beta);
    let gamma = GammaEstimate {
        excess: (b1 - bk) / (1.0 + bk),
        ..GammaEstimate::unity(r, k)
    };
    let gap = |o: &dtdoa::dataio::PairedObservation, rx| {
        seconds_between(
            truth[&(rx, pivot, o.pivot_seq, o.channel)],
            truth[&(rx, blind, o.blind_seq, o.channel)],
        )
    };
    for o in &obs {
        let expected = s.tick_rate_hz * (1.0 + b1) * (gap(o, r) - gap(o, k));
        let got = double_difference(o, r, k, &gamma).unwrap().s_hat;
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }
}

#[test]
fn noiseless_one_shot_is_exact_for_every_strategy_and_solver() {
    let blind = Position::new(6.0, 14.0);
    let mut s = single_pivot_scenario(&garden_layout(), 2, blind);
    offset_clocks(&mut s, 4);
    for strategy in [RefAnchorStrategy::Near, RefAnchorStrategy::Far, RefAnchorStrategy::Mean] {
        for method in [SolverMethod::Hyp, SolverMethod::Ils] {
            let cfg = EstimationConfig {
                strategy,
                solver: SolverConfig::with_method(method),
                ..Default::default()
            };
            let r = estimate_scenario(&s, &cfg, None).unwrap();
            assert!(position_error(&r.position, &blind) < 1e-6, "{strategy:?} {method:?}");
        }
    }
}

#[test]
fn each_active_anchor_instance_is_exact_when_noiseless() {
    let blind = Position::new(12.0, 5.0);
    let mut s = active_anchor_scenario(&hall_layout(), blind);
    offset_clocks(&mut s, 5);
    let out = simulate(&s).unwrap();
    let inst = instances(&out.log, &NodeTable::from_scenario(&s), &s.channels).unwrap();
    assert_eq!(inst.len(), 9);
    for i in &inst {
        assert_eq!(i.anchors.len(), 8);
        let r = estimate_one_shot(
            std::slice::from_ref(i),
            RefAnchorStrategy::Near,
            &SolverConfig::default(),
            &RangingOptions::default(),
        )
        .unwrap();
        assert!(position_error(&r.position, &blind) < 1e-6, "pivot {:?}", i.pivot);
    }
}

#[test]
fn single_slice_snp_equals_one_shot() {
    let mut s = single_pivot_scenario(&garden_layout(), 0, Position::new(9.0, 7.0));
    s.seed = 11;
    let one_shot = estimate_scenario(&s, &EstimationConfig::default(), None).unwrap();
    let snp_cfg = EstimationConfig {
        method: Method::Snp,
        slices: SliceSpec::WHOLE,
        ..Default::default()
    };
    let snp = estimate_scenario(&s, &snp_cfg, None).unwrap();
    assert_eq!(snp.slices.len(), 1);
    assert!(position_error(&snp.position, &one_shot.position) < 1e-12);
}

#[test]
fn noiseless_snp_agrees_with_one_shot() {
    let blind = Position::new(3.0, 16.0);
    let mut s = active_anchor_scenario(&garden_layout(), blind);
    offset_clocks(&mut s, 6);
    s.channels = vec![1, 2];
    s.schedule.packets_per_channel = 60;
    let snp_cfg = EstimationConfig {
        method: Method::Snp,
        ..Default::default()
    };
    let snp = estimate_scenario(&s, &snp_cfg, None).unwrap();
    let one_shot = estimate_scenario(&s, &EstimationConfig::default(), None).unwrap();
    assert!(position_error(&snp.position, &blind) < 1e-6);
    assert!(position_error(&one_shot.position, &blind) < 1e-6);
}

#[test]
fn wrapped_counters_give_the_same_estimate() {
    let mut s = single_pivot_scenario(&garden_layout(), 1, Position::new(10.0, 12.0));
    s.seed = 21;
    // a few wraps of the 2^32 counter at 22 MHz within the run
    s.start_time_s = 190.0;
    s.schedule.packets_per_channel = 1000;
    for n in &mut s.nodes {
        n.clock.alpha = 0.0;
    }
    let plain = estimate_scenario(&s, &EstimationConfig::default(), None).unwrap();
    s.wrap_mode = WrapMode::Bits32;
    let out = simulate(&s).unwrap();
    assert!(out
        .observed_log()
        .records
        .iter()
        .any(|r| r.ticks.whole() < out.log.records[0].ticks.whole()));
    let wrapped = estimate_scenario(&s, &EstimationConfig::default(), None).unwrap();
    assert!(position_error(&plain.position, &wrapped.position) < 1e-9);
}

#[test]
fn every_transmitter_with_known_position_yields_an_instance() {
    let mut s = active_anchor_scenario(&garden_layout(), Position::new(8.0, 8.0));
    s.nodes[1].role = NodeRole::Pivot;
    s.nodes[2].role = NodeRole::Anchor;
    let out = simulate(&s).unwrap();
    let inst = instances(&out.log, &NodeTable::from_scenario(&s), &s.channels).unwrap();
    let pivots: Vec<NodeId> = inst.iter().map(|i| i.pivot).collect();
    assert_eq!(pivots, vec![NodeId(1), NodeId(3), NodeId(4), NodeId(5), NodeId(6)]);
    let r = estimate(&inst, &EstimationConfig::default()).unwrap();
    assert!(position_error(&r.position, &Position::new(8.0, 8.0)) < 1.5);
}
