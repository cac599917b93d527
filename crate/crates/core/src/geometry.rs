//! Planar positions, distances and differential ranges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Propagation speed used for every time/distance conversion, in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("tick rate must be positive, got {0} Hz")]
    NonPositiveTickRate(f64),
    #[error("position has non-finite coordinate ({x}, {y})")]
    NonFinite { x: f64, y: f64 },
}

/// A point in the local 2D frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    /// Builds a position, rejecting NaN or infinite coordinates.
    pub fn checked(x: f64, y: f64) -> Result<Self, GeometryError> {
        let p = Position { x, y };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.x.is_finite() && self.y.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::NonFinite {
                x: self.x,
                y: self.y,
            })
        }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn sub(&self, other: &Position) -> Position {
        Position::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(&self, other: &Position) -> Position {
        Position::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(&self, factor: f64) -> Position {
        Position::new(self.x * factor, self.y * factor)
    }

    /// Arithmetic mean of a set of points. `None` for an empty slice.
    pub fn mean<'a, I>(points: I) -> Option<Position>
    where
        I: IntoIterator<Item = &'a Position>,
    {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for p in points {
            sx += p.x;
            sy += p.y;
            n += 1;
        }
        (n > 0).then(|| Position::new(sx / n as f64, sy / n as f64))
    }
}

/// Euclidean distance between two points.
pub fn distance(a: &Position, b: &Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Differential range `|p - anchor_k| - |p - anchor_1|`.
pub fn diff_range(p: &Position, anchor_k: &Position, anchor_1: &Position) -> f64 {
    distance(p, anchor_k) - distance(p, anchor_1)
}

/// Converts a (possibly fractional) tick count into meters of light travel.
pub fn ticks_to_meters(ticks: f64, tick_rate_hz: f64) -> Result<f64, GeometryError> {
    if !(tick_rate_hz > 0.0) {
        return Err(GeometryError::NonPositiveTickRate(tick_rate_hz));
    }
    Ok(ticks * SPEED_OF_LIGHT / tick_rate_hz)
}

/// The four nodes whose timestamps form one double difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrupletGeometry {
    pub blind_hypothesis: Option<Position>,
    pub pivot: Position,
    pub ref_anchor: Position,
    pub other_anchor: Position,
}

impl QuadrupletGeometry {
    pub fn new(pivot: Position, ref_anchor: Position, other_anchor: Position) -> Option<Self> {
        (ref_anchor != other_anchor).then_some(QuadrupletGeometry {
            blind_hypothesis: None,
            pivot,
            ref_anchor,
            other_anchor,
        })
    }

    pub fn with_blind(mut self, blind: Position) -> Self {
        self.blind_hypothesis = Some(blind);
        self
    }

    /// Pivot-side differential range, fully determined by known positions.
    pub fn pivot_diff_range(&self) -> f64 {
        diff_range(&self.pivot, &self.other_anchor, &self.ref_anchor)
    }

    /// Blind-side differential range for the hypothesised blind position.
    pub fn blind_diff_range(&self) -> Option<f64> {
        self.blind_hypothesis
            .map(|p| diff_range(&p, &self.other_anchor, &self.ref_anchor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&Position::new(0.0, 0.0), &Position::new(3.0, 4.0)), 5.0);
        assert_eq!(distance(&Position::new(1.0, 1.0), &Position::new(1.0, 1.0)), 0.0);
        // sqrt(16^2 + 20^2) = sqrt(656)
        let d = distance(&Position::new(0.0, 0.0), &Position::new(16.0, 20.0));
        assert!((d - 656f64.sqrt()).abs() < 1e-12);
        assert!((d - 25.612496949731394).abs() < 1e-12);
    }

    #[test]
    fn diff_range_examples() {
        let a1 = Position::new(0.0, 0.0);
        let ak = Position::new(10.0, 0.0);
        // on the perpendicular bisector
        assert!(diff_range(&Position::new(5.0, 7.0), &ak, &a1).abs() < 1e-12);
        // collocated with the reference anchor
        assert_eq!(diff_range(&a1, &ak, &a1), 10.0);
    }

    #[test]
    fn square_topology_gives_equal_differential_ranges() {
        // blind and pivot at two opposite corners, anchors at the other two
        let blind = Position::new(0.0, 0.0);
        let pivot = Position::new(10.0, 10.0);
        let a1 = Position::new(10.0, 0.0);
        let ak = Position::new(0.0, 10.0);
        let q = QuadrupletGeometry::new(pivot, a1, ak).unwrap().with_blind(blind);
        assert_eq!(q.blind_diff_range().unwrap(), q.pivot_diff_range());
    }

    #[test]
    fn ticks_to_meters_examples() {
        let one = ticks_to_meters(1.0, 22e6).unwrap();
        assert!((one - 13.627).abs() < 0.01);
        assert_eq!(ticks_to_meters(0.0, 22e6).unwrap(), 0.0);
        assert_eq!(ticks_to_meters(22e6, 22e6).unwrap(), SPEED_OF_LIGHT);
        assert!(ticks_to_meters(1.0, 0.0).is_err());
        assert!(ticks_to_meters(1.0, -5.0).is_err());
        assert!(ticks_to_meters(1.0, f64::NAN).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Position::checked(f64::NAN, 0.0).is_err());
        assert!(Position::checked(0.0, f64::INFINITY).is_err());
        assert!(QuadrupletGeometry::new(Position::default(), Position::new(1.0, 1.0), Position::new(1.0, 1.0)).is_none());
    }

    fn pos() -> impl Strategy<Value = Position> {
        (-100.0..100.0f64, -100.0..100.0f64).prop_map(|(x, y)| Position::new(x, y))
    }

    proptest! {
        #[test]
        fn diff_range_bounded_by_baseline(p in pos(), a in pos(), b in pos()) {
            let dr = diff_range(&p, &a, &b);
            prop_assert!(dr.abs() <= distance(&a, &b) + 1e-9);
        }

        #[test]
        fn diff_range_antisymmetric(p in pos(), a in pos(), b in pos()) {
            prop_assert!((diff_range(&p, &a, &b) + diff_range(&p, &b, &a)).abs() < 1e-12);
        }

        #[test]
        fn triangle_inequality(a in pos(), b in pos(), c in pos()) {
            prop_assert!(distance(&a, &c) <= distance(&a, &b) + distance(&b, &c) + 1e-9);
            prop_assert_eq!(distance(&a, &b), distance(&b, &a));
        }
    }
}
