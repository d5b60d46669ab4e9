//! Forward model of one fiber-cavity sensing channel.
//!
//! Finger midpoint displacement maps to photoresistor voltage in three
//! regimes: a rest band where the cavity is not yet engaged and readings are
//! just unstable noise around the rest voltage, a linear band where bending
//! attenuates the transmitted light proportionally, and a saturated band
//! where further bending no longer changes the optics and the reading
//! freezes. Every output is clamped to the 0-5 V rail and quantized to the
//! configured ADC depth.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const RAIL_V: f64 = 5.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SensorError {
    #[error("displacement {displacement_mm} mm outside [0, {d_max_mm}] mm")]
    DisplacementOutOfRange { displacement_mm: f64, d_max_mm: f64 },
    #[error("displacement path is empty")]
    EmptyPath,
    #[error("displacement path timestamps must be strictly increasing")]
    NonMonotonicPath,
    #[error("sample rate must be positive, got {0}")]
    BadRate(f64),
    #[error("invalid channel model: {0}")]
    InvalidModel(String),
}

/// Parametric displacement -> voltage model of a single channel.
///
/// `rng_seed` makes noisy trace generation reproducible: each call to
/// [`SensorChannelModel::sample_trace`] owns a fresh generator seeded from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorChannelModel {
    pub channel_id: u8,
    /// Voltage at zero displacement, V.
    pub v_rest: f64,
    /// Displacement where the linear band begins, mm.
    pub d_lo: f64,
    /// Displacement where the linear band ends, mm.
    pub d_hi: f64,
    /// Mechanical limit, mm.
    pub d_max: f64,
    /// Voltage change per mm of displacement in the linear band, V/mm. Negative:
    /// bending attenuates the received light.
    pub slope: f64,
    /// Noise std-dev inside the linear band, V.
    pub noise_sigma_linear: f64,
    /// Noise std-dev in the rest and saturated bands, V.
    pub noise_sigma_unstable: f64,
    /// Additive bias from ambient light, V. Applies where the cavity modulates
    /// the signal, i.e. from the linear band on.
    pub ambient_offset: f64,
    pub adc_bits: u8,
    pub rng_seed: u64,
}

impl Default for SensorChannelModel {
    fn default() -> Self {
        SensorChannelModel {
            channel_id: 0,
            v_rest: 4.5,
            d_lo: 5.0,
            d_hi: 30.0,
            d_max: 35.0,
            slope: -0.12,
            noise_sigma_linear: 0.12,
            noise_sigma_unstable: 0.20,
            ambient_offset: 0.0,
            adc_bits: 10,
            rng_seed: 0,
        }
    }
}

/// One timestamped voltage sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub timestamp_ms: f64,
    pub channel_id: u8,
    pub voltage: f64,
}

impl SensorChannelModel {
    pub fn validate(&self) -> Result<(), SensorError> {
        let err = |m: String| Err(SensorError::InvalidModel(m));
        if !(0.0..=RAIL_V).contains(&self.v_rest) {
            return err(format!("v_rest {} outside [0, 5] V", self.v_rest));
        }
        if !(self.d_lo > 0.0 && self.d_lo < self.d_hi && self.d_hi <= self.d_max) {
            return err(format!(
                "need 0 < d_lo < d_hi <= d_max, got {} / {} / {}",
                self.d_lo, self.d_hi, self.d_max
            ));
        }
        if self.slope >= 0.0 {
            return err(format!("slope must be negative, got {}", self.slope));
        }
        if !(self.noise_sigma_unstable > self.noise_sigma_linear && self.noise_sigma_linear >= 0.0)
        {
            return err(format!(
                "need noise_sigma_unstable > noise_sigma_linear >= 0, got {} / {}",
                self.noise_sigma_unstable, self.noise_sigma_linear
            ));
        }
        if self.adc_bits == 0 || self.adc_bits > 16 {
            return err(format!("adc_bits {} outside 1..=16", self.adc_bits));
        }
        for (name, v) in [
            ("v_rest", self.v_rest),
            ("slope", self.slope),
            ("ambient_offset", self.ambient_offset),
            ("noise_sigma_linear", self.noise_sigma_linear),
            ("noise_sigma_unstable", self.noise_sigma_unstable),
        ] {
            if !v.is_finite() {
                return err(format!("{name} is not finite"));
            }
        }
        Ok(())
    }

    /// Largest ADC code for this channel's depth.
    pub fn adc_levels(&self) -> u32 {
        (1u32 << self.adc_bits) - 1
    }

    /// One ADC step in volts.
    pub fn adc_step_v(&self) -> f64 {
        RAIL_V / self.adc_levels() as f64
    }

    /// Clamp to the rail, then snap to the nearest ADC code.
    pub fn quantize(&self, volts: f64) -> f64 {
        let levels = self.adc_levels() as f64;
        let code = (volts.clamp(0.0, RAIL_V) / RAIL_V * levels).round();
        code * RAIL_V / levels
    }

    /// Noise-free voltage at a displacement.
    pub fn voltage_at(&self, displacement_mm: f64) -> Result<f64, SensorError> {
        self.voltage_inner(displacement_mm, None)
    }

    /// Voltage at a displacement with band-dependent Gaussian noise drawn from
    /// the caller's generator.
    pub fn voltage_at_noisy(
        &self,
        displacement_mm: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, SensorError> {
        self.voltage_inner(displacement_mm, Some(rng))
    }

    fn voltage_inner(
        &self,
        d: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, SensorError> {
        if !(0.0..=self.d_max).contains(&d) || d.is_nan() {
            return Err(SensorError::DisplacementOutOfRange {
                displacement_mm: d,
                d_max_mm: self.d_max,
            });
        }
        // Rest band carries no trend and no ambient term: the cavity is not
        // engaged yet, so the photoresistor only sees its idle level.
        let (clean, sigma) = if d < self.d_lo {
            (self.v_rest, self.noise_sigma_unstable)
        } else if d <= self.d_hi {
            (
                self.v_rest + self.slope * (d - self.d_lo) + self.ambient_offset,
                self.noise_sigma_linear,
            )
        } else {
            (
                self.v_rest + self.slope * (self.d_hi - self.d_lo) + self.ambient_offset,
                self.noise_sigma_unstable,
            )
        };
        let noisy = match rng {
            Some(r) => {
                let n = Normal::new(0.0, sigma).expect("sigma validated non-negative");
                clean + n.sample(r)
            }
            None => clean,
        };
        Ok(self.quantize(noisy))
    }

    /// Sample a displacement path at a uniform rate.
    ///
    /// The path is a piecewise-linear displacement profile given as
    /// `(timestamp_ms, displacement_mm)` knots with strictly increasing
    /// timestamps. Readings are emitted from the first knot to the last at
    /// `1000 / rate_hz` ms intervals. With `noise` on, draws come from a
    /// generator seeded with `rng_seed`, so identical inputs give identical
    /// traces.
    pub fn sample_trace(
        &self,
        path: &[(f64, f64)],
        rate_hz: f64,
        noise: bool,
    ) -> Result<Vec<SensorReading>, SensorError> {
        if path.is_empty() {
            return Err(SensorError::EmptyPath);
        }
        if !(rate_hz > 0.0) {
            return Err(SensorError::BadRate(rate_hz));
        }
        if path.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(SensorError::NonMonotonicPath);
        }
        let dt_ms = 1000.0 / rate_hz;
        let t_end = path[path.len() - 1].0;
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        let mut out = Vec::new();
        let mut k = 0u64;
        loop {
            let t = path[0].0 + k as f64 * dt_ms;
            // Half-step slack so float accumulation cannot drop the last sample.
            if t > t_end + dt_ms * 1e-9 {
                break;
            }
            let d = interpolate_path(path, t.min(t_end));
            let v = if noise {
                self.voltage_at_noisy(d, &mut rng)?
            } else {
                self.voltage_at(d)?
            };
            out.push(SensorReading {
                timestamp_ms: t,
                channel_id: self.channel_id,
                voltage: v,
            });
            k += 1;
        }
        Ok(out)
    }

    /// Copy with slope gain and rest voltage perturbed, standing in for unit
    /// to unit fabrication and assembly differences. Gain multiplies the slope
    /// by a uniform draw from `[1 - gain_spread, 1 + gain_spread]`; the rest
    /// voltage shifts uniformly within `offset_spread` volts. Model invariants
    /// are re-clamped if a draw would violate them.
    pub fn with_fabrication_variation(
        &self,
        seed: u64,
        gain_spread: f64,
        offset_spread: f64,
    ) -> SensorChannelModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 1.0 - gain_spread + 2.0 * gain_spread * rng.gen::<f64>();
        let offset = -offset_spread + 2.0 * offset_spread * rng.gen::<f64>();
        let mut out = self.clone();
        out.slope = (self.slope * gain).min(-1e-9);
        out.v_rest = (self.v_rest + offset).clamp(0.0, RAIL_V);
        out
    }

    pub fn with_channel_id(mut self, channel_id: u8) -> Self {
        self.channel_id = channel_id;
        self
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }
}

fn interpolate_path(path: &[(f64, f64)], t: f64) -> f64 {
    if t <= path[0].0 {
        return path[0].1;
    }
    for w in path.windows(2) {
        let ((t0, d0), (t1, d1)) = (w[0], w[1]);
        if t <= t1 {
            return d0 + (d1 - d0) * (t - t0) / (t1 - t0);
        }
    }
    path[path.len() - 1].1
}
