//! Localisation of a transmitter from reception timestamps collected by
//! anchors whose clocks are neither synchronised nor syntonised.
//!
//! Pipeline: [`dataio`] loads and pairs packets, [`ranging`] turns paired
//! timestamps into differential ranges, [`solvers`] computes positions and
//! [`fusion`] combines estimates over subsets of the data. [`sim`] produces
//! synthetic logs and [`eval`] runs Monte-Carlo experiments.

// `!(x > 0.0)` is used on purpose to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod dataio;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod log;
pub mod presets;
pub mod ranging;
pub mod sim;
pub mod solvers;
pub mod timestamp;
