//! Per-node clock error model.
//!
//! A receiver reporting an event at true time `r` writes
//! `alpha + (1 + beta) * r + h(r) + omega`, expressed in counter ticks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timestamp::Ticks;

/// Frequency deviations at or beyond this magnitude are rejected as implausible.
pub const MAX_ABS_BETA: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum ClockError {
    #[error("relative frequency deviation {0} out of range (|beta| < 1e-3)")]
    BetaOutOfRange(f64),
    #[error("clock offset must be finite, got {0}")]
    NonFiniteOffset(f64),
    #[error("invalid drift: {0}")]
    Drift(String),
    #[error("invalid noise: {0}")]
    Noise(String),
}

/// Slowly varying clock error component `h(r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    #[default]
    None,
    /// Frequency changing linearly in time: `h(r) = rate * r^2 / 2`.
    FrequencyRamp { rate_per_s: f64 },
    /// `h(r) = amplitude * sin(2 pi r / period)`.
    Sinusoid { amplitude_s: f64, period_s: f64 },
}

impl Drift {
    pub fn offset_at(&self, r: f64) -> f64 {
        match *self {
            Drift::None => 0.0,
            Drift::FrequencyRamp { rate_per_s } => 0.5 * rate_per_s * r * r,
            Drift::Sinusoid {
                amplitude_s,
                period_s,
            } => amplitude_s * (std::f64::consts::TAU * r / period_s).sin(),
        }
    }

    fn validate(&self) -> Result<(), ClockError> {
        match *self {
            Drift::None => Ok(()),
            Drift::FrequencyRamp { rate_per_s } if rate_per_s.is_finite() => Ok(()),
            Drift::FrequencyRamp { rate_per_s } => {
                Err(ClockError::Drift(format!("ramp rate {rate_per_s}")))
            }
            Drift::Sinusoid {
                amplitude_s,
                period_s,
            } => {
                if amplitude_s.is_finite() && period_s.is_finite() && period_s > 0.0 {
                    Ok(())
                } else {
                    Err(ClockError::Drift(format!(
                        "sinusoid amplitude {amplitude_s} period {period_s}"
                    )))
                }
            }
        }
    }
}

/// Fast-varying error component `omega`.
///
/// Every variant except `None` produces integer tick counts: the counter
/// is sampled by truncation after any Gaussian error is added.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    /// Ideal counter: the fractional tick is kept.
    None,
    /// Truncation to the tick below, a uniform error of width one tick.
    #[default]
    Quantization,
    Gaussian { sigma_s: f64 },
    GaussianBias { sigma_s: f64, bias_s: f64 },
}

impl Noise {
    pub fn is_quantized(&self) -> bool {
        !matches!(self, Noise::None)
    }

    fn validate(&self) -> Result<(), ClockError> {
        match *self {
            Noise::None | Noise::Quantization => Ok(()),
            Noise::Gaussian { sigma_s } | Noise::GaussianBias { sigma_s, .. }
                if !(sigma_s >= 0.0 && sigma_s.is_finite()) =>
            {
                Err(ClockError::Noise(format!("sigma {sigma_s}")))
            }
            Noise::GaussianBias { bias_s, .. } if !bias_s.is_finite() => {
                Err(ClockError::Noise(format!("bias {bias_s}")))
            }
            _ => Ok(()),
        }
    }

    /// Draws the additive error in seconds. Consumes randomness only for the
    /// Gaussian variants.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Noise::None | Noise::Quantization => 0.0,
            Noise::Gaussian { sigma_s } => gaussian(sigma_s, rng),
            Noise::GaussianBias { sigma_s, bias_s } => bias_s + gaussian(sigma_s, rng),
        }
    }
}

fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma)
        .expect("sigma validated non-negative and finite")
        .sample(rng)
}

/// Defaults to an ideal clock with the default (quantising) noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    /// Initial offset, seconds.
    #[serde(default)]
    pub alpha: f64,
    /// Relative frequency deviation.
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub drift: Drift,
    #[serde(default)]
    pub noise: Noise,
}

impl ClockModel {
    /// Perfect clock: no offset, skew, drift or noise.
    pub const fn ideal() -> Self {
        ClockModel {
            alpha: 0.0,
            beta: 0.0,
            drift: Drift::None,
            noise: Noise::None,
        }
    }

    pub fn with_offset(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn with_noise(mut self, noise: Noise) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_drift(mut self, drift: Drift) -> Self {
        self.drift = drift;
        self
    }

    pub fn validate(&self) -> Result<(), ClockError> {
        if !self.alpha.is_finite() {
            return Err(ClockError::NonFiniteOffset(self.alpha));
        }
        if !(self.beta.abs() < MAX_ABS_BETA) {
            return Err(ClockError::BetaOutOfRange(self.beta));
        }
        self.drift.validate()?;
        self.noise.validate()
    }

    /// Timestamp for an event at true time `reception` (seconds), drawing
    /// noise from `rng`.
    pub fn local_timestamp<R: Rng + ?Sized>(
        &self,
        reception: SplitSeconds,
        tick_rate_hz: f64,
        rng: &mut R,
    ) -> Ticks {
        let omega = self.noise.sample(rng);
        self.timestamp_with_noise(reception, tick_rate_hz, omega)
    }

    /// Deterministic part of [`ClockModel::local_timestamp`] for a given
    /// realised noise value `omega` (seconds).
    pub fn timestamp_with_noise(&self, reception: SplitSeconds, tick_rate_hz: f64, omega: f64) -> Ticks {
        let r = DoubleDouble::sum(reception.hi, reception.lo);
        // (1 + beta) r = r + beta r
        let skewed = r.add(r.mul(self.beta));
        let slow = self.drift.offset_at(reception.value()) + omega;
        let local = skewed
            .add(DoubleDouble::from(self.alpha))
            .add(DoubleDouble::from(slow));
        let ticks = local.mul(tick_rate_hz);
        let exact = ticks.split();
        if self.noise.is_quantized() {
            Ticks::from_int(exact.whole())
        } else {
            exact
        }
    }
}

/// Time in seconds carried as an unevaluated sum `hi + lo`, so that a small
/// propagation delay added to a large transmission time is not rounded away.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSeconds {
    pub hi: f64,
    pub lo: f64,
}

impl SplitSeconds {
    pub fn new(hi: f64, lo: f64) -> Self {
        SplitSeconds { hi, lo }
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

impl From<f64> for SplitSeconds {
    fn from(v: f64) -> Self {
        SplitSeconds { hi: v, lo: 0.0 }
    }
}

/// Minimal double-double arithmetic (error-free transforms).
#[derive(Debug, Clone, Copy)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl From<f64> for DoubleDouble {
    fn from(v: f64) -> Self {
        DoubleDouble { hi: v, lo: 0.0 }
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl DoubleDouble {
    fn sum(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, b);
        DoubleDouble { hi, lo }
    }

    fn add(self, o: DoubleDouble) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (hi, lo) = two_sum(s, e + self.lo + o.lo);
        DoubleDouble { hi, lo }
    }

    fn mul(self, k: f64) -> Self {
        let p = self.hi * k;
        let e = self.hi.mul_add(k, -p);
        let (hi, lo) = two_sum(p, e + self.lo * k);
        DoubleDouble { hi, lo }
    }

    fn split(self) -> Ticks {
        let w = self.hi.floor();
        // hi - floor(hi) is exact.
        Ticks::from_parts(w as i64, (self.hi - w) + self.lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const F: f64 = 22e6;

    fn stamp(clock: ClockModel, r: f64) -> Ticks {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        clock.local_timestamp(r.into(), F, &mut rng)
    }

    #[test]
    fn ideal_clock_one_second() {
        assert_eq!(stamp(ClockModel::ideal(), 1.0), Ticks::from_int(22_000_000));
    }

    #[test]
    fn pure_offset() {
        let c = ClockModel::ideal().with_offset(1.0, 0.0);
        assert_eq!(stamp(c, 2.0), Ticks::from_int(66_000_000));
    }

    #[test]
    fn pure_skew() {
        let c = ClockModel::ideal().with_offset(0.0, 1e-5);
        let t = stamp(c, 2.0);
        // (1 + 1e-5) * 2 s * 22 MHz = 44 000 440
        assert!((t.whole() as f64 + t.frac() - 44_000_440.0).abs() < 1e-6);
    }

    #[test]
    fn quantization_truncates() {
        let c = ClockModel::ideal().with_noise(Noise::Quantization);
        // 1.7 ticks
        let t = stamp(c, 1.7 / F);
        assert_eq!(t, Ticks::from_int(1));
    }

    #[test]
    fn keeps_sub_tick_precision_at_large_counts() {
        let c = ClockModel::ideal().with_offset(0.3, 2e-5);
        let t1 = c.timestamp_with_noise(SplitSeconds::new(150.0, 1e-8), F, 0.0);
        let t0 = c.timestamp_with_noise(SplitSeconds::new(150.0, 0.0), F, 0.0);
        // 10 ns of flight at (1 + 2e-5) * 22 MHz
        let expected = 1e-8 * (1.0 + 2e-5) * F;
        assert!((t1.since(&t0).as_f64() - expected).abs() < 1e-12);
    }

    #[test]
    fn drift_shapes() {
        assert_eq!(Drift::None.offset_at(3.0), 0.0);
        assert_eq!(Drift::FrequencyRamp { rate_per_s: 2.0 }.offset_at(3.0), 9.0);
        let s = Drift::Sinusoid {
            amplitude_s: 1e-6,
            period_s: 4.0,
        };
        assert!((s.offset_at(1.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn gaussian_noise_is_seeded() {
        let c = ClockModel::ideal().with_noise(Noise::Gaussian { sigma_s: 1e-7 });
        assert_eq!(stamp(c, 1.0), stamp(c, 1.0));
    }

    #[test]
    fn validation() {
        assert!(ClockModel::ideal().with_offset(0.0, 2e-3).validate().is_err());
        assert!(ClockModel::ideal()
            .with_noise(Noise::Gaussian { sigma_s: -1.0 })
            .validate()
            .is_err());
        assert!(ClockModel::ideal()
            .with_drift(Drift::Sinusoid {
                amplitude_s: 1e-6,
                period_s: 0.0
            })
            .validate()
            .is_err());
        assert!(ClockModel::ideal().with_offset(0.5, -4e-5).validate().is_ok());
    }

    #[test]
    fn serde_shape() {
        let c = ClockModel::ideal().with_noise(Noise::GaussianBias {
            sigma_s: 1e-8,
            bias_s: 2e-8,
        });
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"kind\":\"gaussian_bias\""));
        let back: ClockModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let minimal: ClockModel = serde_json::from_str("{}").unwrap();
        assert_eq!(minimal.noise, Noise::Quantization);
    }
}
