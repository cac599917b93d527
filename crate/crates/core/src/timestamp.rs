//! Receiver timestamps in counter ticks.
//!
//! A timestamp is an integer tick count plus an optional sub-tick fraction.
//! Hardware counters only ever produce the integer part; the fraction exists
//! so that an ideal (unquantised) clock can be represented without losing
//! precision to the large absolute magnitude of the counter.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const WRAP_32: i64 = 1 << 32;

#[derive(Debug, Error, PartialEq)]
pub enum TicksParseError {
    #[error("empty timestamp")]
    Empty,
    #[error("invalid timestamp `{0}`")]
    Invalid(String),
}

/// Tick count `whole + frac` with `0 <= frac < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ticks {
    whole: i64,
    frac: f64,
}

impl Ticks {
    pub const fn from_int(whole: i64) -> Self {
        Ticks { whole, frac: 0.0 }
    }

    /// Normalises an arbitrary `(whole, frac)` split so that the fraction is in `[0, 1)`.
    pub fn from_parts(whole: i64, frac: f64) -> Self {
        let carry = frac.floor();
        let mut w = whole + carry as i64;
        let mut f = frac - carry;
        if f >= 1.0 {
            w += 1;
            f -= 1.0;
        }
        if f < 0.0 {
            w -= 1;
            f += 1.0;
        }
        Ticks { whole: w, frac: f }
    }

    pub fn whole(&self) -> i64 {
        self.whole
    }

    pub fn frac(&self) -> f64 {
        self.frac
    }

    pub fn is_integral(&self) -> bool {
        self.frac == 0.0
    }

    /// Nearest f64. Loses sub-tick precision for large counts.
    pub fn as_f64(&self) -> f64 {
        self.whole as f64 + self.frac
    }

    /// Value a free-running 32-bit counter would report.
    pub fn wrapped32(&self) -> u32 {
        self.whole.rem_euclid(WRAP_32) as u32
    }

    pub fn with_whole(&self, whole: i64) -> Ticks {
        Ticks {
            whole,
            frac: self.frac,
        }
    }

    pub fn offset_whole(&self, by: i64) -> Ticks {
        self.with_whole(self.whole + by)
    }

    /// Exact difference `self - earlier`, kept split.
    pub fn since(&self, earlier: &Ticks) -> TickDelta {
        TickDelta {
            whole: self.whole - earlier.whole,
            frac: self.frac - earlier.frac,
        }
    }
}

impl PartialOrd for Ticks {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(
            self.whole
                .cmp(&other.whole)
                .then(self.frac.total_cmp(&other.frac)),
        )
    }
}

impl fmt::Display for Ticks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.frac == 0.0 {
            write!(f, "{}", self.whole)
        } else {
            // f64 Display is the shortest round-tripping decimal and never
            // uses exponent notation, so "0.xxx" -> "whole.xxx".
            let frac = format!("{}", self.frac);
            write!(f, "{}{}", self.whole, &frac[1..])
        }
    }
}

impl FromStr for Ticks {
    type Err = TicksParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(TicksParseError::Empty);
        }
        let invalid = || TicksParseError::Invalid(s.to_string());
        match s.split_once('.') {
            None => s.parse::<i64>().map(Ticks::from_int).map_err(|_| invalid()),
            Some((w, f)) => {
                if w.starts_with('-') || f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(invalid());
                }
                let whole = w.parse::<i64>().map_err(|_| invalid())?;
                let frac = format!("0.{f}").parse::<f64>().map_err(|_| invalid())?;
                Ok(Ticks::from_parts(whole, frac))
            }
        }
    }
}

/// Difference of two timestamps: exact integer part plus a fraction in (-1, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickDelta {
    pub whole: i64,
    pub frac: f64,
}

impl TickDelta {
    pub fn as_f64(&self) -> f64 {
        self.whole as f64 + self.frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integer_display_has_no_fraction() {
        assert_eq!(Ticks::from_int(22_000_000).to_string(), "22000000");
        assert_eq!("44000440".parse::<Ticks>().unwrap(), Ticks::from_int(44_000_440));
    }

    #[test]
    fn fractional_display() {
        let t = Ticks::from_parts(12, 0.25);
        assert_eq!(t.to_string(), "12.25");
        assert_eq!("12.25".parse::<Ticks>().unwrap(), t);
    }

    #[test]
    fn normalises_fraction() {
        let t = Ticks::from_parts(10, -0.25);
        assert_eq!(t.whole(), 9);
        assert_eq!(t.frac(), 0.75);
        let t = Ticks::from_parts(10, 2.5);
        assert_eq!((t.whole(), t.frac()), (12, 0.5));
    }

    #[test]
    fn rejects_garbage() {
        assert!("".parse::<Ticks>().is_err());
        assert!("abc".parse::<Ticks>().is_err());
        assert!("-3.5".parse::<Ticks>().is_err());
        assert!("3.".parse::<Ticks>().is_err());
        assert!("3.1e5".parse::<Ticks>().is_err());
    }

    #[test]
    fn wrap_view() {
        assert_eq!(Ticks::from_int(WRAP_32 + 5).wrapped32(), 5);
        assert_eq!(Ticks::from_int(7).wrapped32(), 7);
    }

    #[test]
    fn ordering() {
        assert!(Ticks::from_parts(3, 0.5) < Ticks::from_parts(3, 0.75));
        assert!(Ticks::from_parts(3, 0.9) < Ticks::from_int(4));
    }

    proptest! {
        #[test]
        fn text_round_trip(whole in 0i64..(1i64 << 40), frac in 0.0..1.0f64) {
            let t = Ticks::from_parts(whole, frac);
            let back: Ticks = t.to_string().parse().unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn delta_is_exact_for_integers(a in 0i64..(1i64 << 50), b in 0i64..(1i64 << 50)) {
            let d = Ticks::from_int(a).since(&Ticks::from_int(b));
            prop_assert_eq!(d.whole, a - b);
            prop_assert_eq!(d.frac, 0.0);
        }
    }
}
