//! Plate calibration: turning grasps of known-width plates into per-channel
//! linear voltage <-> displacement maps.
//!
//! The protocol closes the gripper on a plate of standard width to a
//! commanded gap; the overtravel is shared by the deforming fingertips, which
//! pins the midpoint displacement, and the steady sensor voltage is recorded.
//! An ordinary least-squares line per channel, gated on its coefficient of
//! determination, becomes the calibrated map.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CalibrationError {
    #[error("need at least 2 points, got {0}")]
    InsufficientData(usize),
    #[error("all abscissae identical, fit is degenerate")]
    DegenerateAbscissa,
    #[error("channel {channel} has constant voltage, cannot normalize")]
    DegenerateChannel { channel: usize },
    #[error(
        "calibration displacements must cover >= {required_mm} mm over >= 3 distinct values \
         inside the valid interval; got {distinct} values spanning {span_mm:.3} mm"
    )]
    InsufficientSpan {
        distinct: usize,
        span_mm: f64,
        required_mm: f64,
    },
    #[error("no channel passed calibration; per-channel r²: {r2_by_channel:?}")]
    CalibrationFailed { r2_by_channel: Vec<(u8, f64)> },
    #[error("channel {0} not present in profile")]
    MissingChannel(u8),
    #[error("profiles cover different channel sets and cannot be compared")]
    IncomparableProfiles,
    #[error("samples disagree on channel count: {0} vs {1}")]
    RaggedSamples(usize, usize),
    #[error("invalid calibration sample: {0}")]
    InvalidSample(String),
}

/// Steady-state record of one plate grasp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub plate_width_mm: f64,
    pub commanded_gap_mm: f64,
    /// Per-fingertip midpoint displacement implied by the overtravel:
    /// `(plate_width - commanded_gap) / n_deforming_fingers`.
    pub implied_displacement_mm: f64,
    /// Mean steady voltage per channel, indexed by channel id.
    pub channel_voltages: Vec<f64>,
    pub repetitions: u32,
}

impl CalibrationSample {
    pub fn new(
        plate_width_mm: f64,
        commanded_gap_mm: f64,
        n_deforming_fingers: u8,
        channel_voltages: Vec<f64>,
        repetitions: u32,
    ) -> Result<Self, CalibrationError> {
        if !(plate_width_mm > commanded_gap_mm && commanded_gap_mm >= 0.0) {
            return Err(CalibrationError::InvalidSample(format!(
                "need plate_width > commanded_gap >= 0, got {plate_width_mm} / {commanded_gap_mm}"
            )));
        }
        if n_deforming_fingers == 0 || repetitions == 0 {
            return Err(CalibrationError::InvalidSample(
                "n_deforming_fingers and repetitions must be >= 1".into(),
            ));
        }
        Ok(CalibrationSample {
            plate_width_mm,
            commanded_gap_mm,
            implied_displacement_mm: (plate_width_mm - commanded_gap_mm)
                / n_deforming_fingers as f64,
            channel_voltages,
            repetitions,
        })
    }
}

/// Slope/intercept/r² of one least-squares line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Accepted calibration line for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelFit {
    pub channel_id: u8,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Displacement interval over which the calibration line is trusted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidInterval {
    pub lo_mm: f64,
    pub hi_mm: f64,
}

impl ValidInterval {
    pub fn new(lo_mm: f64, hi_mm: f64) -> Self {
        assert!(lo_mm < hi_mm, "valid interval must be nonempty");
        ValidInterval { lo_mm, hi_mm }
    }

    pub fn contains(&self, d: f64) -> bool {
        (self.lo_mm..=self.hi_mm).contains(&d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeStatus {
    InRange,
    BelowRange,
    AboveRange,
}

/// Displacement recovered from a voltage, with its validity status.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementReading {
    pub displacement_mm: f64,
    pub status: RangeStatus,
}

/// Per-channel calibrated maps plus the acceptance policy that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    /// Accepted fits, sorted by channel id. Rejected channels are absent.
    pub channels: Vec<ChannelFit>,
    pub valid_interval: ValidInterval,
    pub n_deforming_fingers: u8,
    pub created_at_ms: u64,
    pub r2_threshold: f64,
}

/// Per-channel change between two profiles of the same rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDrift {
    pub channel_id: u8,
    pub slope_ratio: f64,
    pub intercept_delta: f64,
}

// ---------------------------------------------------------------------------
// fitting
// ---------------------------------------------------------------------------

/// Ordinary least-squares line through `(x, y)` points.
///
/// `r_squared = 1 - SS_res / SS_tot`, and is defined as 1 when both sums are
/// zero (all points identical on a representable line).
pub fn fit_linear(points: &[(f64, f64)]) -> Result<LinearFit, CalibrationError> {
    if points.len() < 2 {
        return Err(CalibrationError::InsufficientData(points.len()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(CalibrationError::DegenerateAbscissa);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in points {
        let e = y - (intercept + slope * x);
        ss_res += e * e;
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Rescale each channel affinely so its voltage at the smallest calibration
/// displacement reads 1.0 and at the largest reads 0.0. Presentation helper;
/// calibration itself fits raw voltages.
pub fn normalize_channels(
    samples: &[CalibrationSample],
) -> Result<Vec<CalibrationSample>, CalibrationError> {
    if samples.len() < 2 {
        return Err(CalibrationError::InsufficientData(samples.len()));
    }
    let n_channels = check_channel_counts(samples)?;
    let lo = samples
        .iter()
        .min_by(|a, b| a.implied_displacement_mm.total_cmp(&b.implied_displacement_mm))
        .expect("nonempty");
    let hi = samples
        .iter()
        .max_by(|a, b| a.implied_displacement_mm.total_cmp(&b.implied_displacement_mm))
        .expect("nonempty");
    let mut out = samples.to_vec();
    for ch in 0..n_channels {
        let (v_lo, v_hi) = (lo.channel_voltages[ch], hi.channel_voltages[ch]);
        if v_lo == v_hi {
            return Err(CalibrationError::DegenerateChannel { channel: ch });
        }
        for s in &mut out {
            s.channel_voltages[ch] = (s.channel_voltages[ch] - v_hi) / (v_lo - v_hi);
        }
    }
    Ok(out)
}

fn check_channel_counts(samples: &[CalibrationSample]) -> Result<usize, CalibrationError> {
    let n = samples[0].channel_voltages.len();
    for s in samples {
        if s.channel_voltages.len() != n {
            return Err(CalibrationError::RaggedSamples(n, s.channel_voltages.len()));
        }
    }
    Ok(n)
}

pub const MIN_CALIBRATION_SPAN_MM: f64 = 10.0;

#[derive(Debug, Clone, Copy)]
pub struct CalibrateOptions {
    pub r2_threshold: f64,
    pub valid_interval: ValidInterval,
    pub n_deforming_fingers: u8,
    pub created_at_ms: u64,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            r2_threshold: 0.95,
            valid_interval: ValidInterval::new(5.0, 30.0),
            n_deforming_fingers: 2,
            created_at_ms: 0,
        }
    }
}

/// Fit every channel over the samples that fall inside the valid interval and
/// keep the ones whose line is credible.
///
/// A channel is rejected when its r² falls below the threshold or its slope
/// is not negative (more displacement must mean less light). Samples outside
/// the valid interval are ignored: the map is only claimed there, and rest or
/// saturated readings would drag the line. Sample order does not matter; the
/// points are sorted before the sums are taken so permutations produce
/// bit-identical profiles.
pub fn calibrate(
    samples: &[CalibrationSample],
    opts: &CalibrateOptions,
) -> Result<CalibrationProfile, CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::InsufficientData(0));
    }
    let n_channels = check_channel_counts(samples)?;
    let mut in_range: Vec<&CalibrationSample> = samples
        .iter()
        .filter(|s| opts.valid_interval.contains(s.implied_displacement_mm))
        .collect();
    in_range.sort_by(|a, b| {
        a.implied_displacement_mm
            .total_cmp(&b.implied_displacement_mm)
            .then(a.plate_width_mm.total_cmp(&b.plate_width_mm))
    });

    let mut distinct = 0usize;
    let mut last = f64::NAN;
    for s in &in_range {
        if s.implied_displacement_mm != last {
            distinct += 1;
            last = s.implied_displacement_mm;
        }
    }
    let span = match (in_range.first(), in_range.last()) {
        (Some(a), Some(b)) => b.implied_displacement_mm - a.implied_displacement_mm,
        _ => 0.0,
    };
    if distinct < 3 || span < MIN_CALIBRATION_SPAN_MM {
        return Err(CalibrationError::InsufficientSpan {
            distinct,
            span_mm: span,
            required_mm: MIN_CALIBRATION_SPAN_MM,
        });
    }

    let mut accepted = Vec::new();
    let mut r2_by_channel = Vec::new();
    for ch in 0..n_channels {
        let points: Vec<(f64, f64)> = in_range
            .iter()
            .map(|s| (s.implied_displacement_mm, s.channel_voltages[ch]))
            .collect();
        let fit = fit_linear(&points)?;
        r2_by_channel.push((ch as u8, fit.r_squared));
        if fit.r_squared >= opts.r2_threshold && fit.slope < 0.0 {
            accepted.push(ChannelFit {
                channel_id: ch as u8,
                slope: fit.slope,
                intercept: fit.intercept,
                r_squared: fit.r_squared,
            });
        }
    }
    if accepted.is_empty() {
        return Err(CalibrationError::CalibrationFailed { r2_by_channel });
    }
    Ok(CalibrationProfile {
        channels: accepted,
        valid_interval: opts.valid_interval,
        n_deforming_fingers: opts.n_deforming_fingers,
        created_at_ms: opts.created_at_ms,
        r2_threshold: opts.r2_threshold,
    })
}

impl CalibrationProfile {
    pub fn channel(&self, channel_id: u8) -> Option<&ChannelFit> {
        self.channels.iter().find(|c| c.channel_id == channel_id)
    }

    /// Invert the calibrated line for one channel.
    ///
    /// The displacement is always returned, even out of range, so callers can
    /// log what the sensor claimed; `status` says whether the line is trusted
    /// there.
    pub fn voltage_to_displacement(
        &self,
        channel_id: u8,
        voltage: f64,
    ) -> Result<DisplacementReading, CalibrationError> {
        let fit = self
            .channel(channel_id)
            .ok_or(CalibrationError::MissingChannel(channel_id))?;
        let displacement_mm = (voltage - fit.intercept) / fit.slope;
        let status = if displacement_mm < self.valid_interval.lo_mm {
            RangeStatus::BelowRange
        } else if displacement_mm > self.valid_interval.hi_mm {
            RangeStatus::AboveRange
        } else {
            RangeStatus::InRange
        };
        Ok(DisplacementReading {
            displacement_mm,
            status,
        })
    }
}

/// Per-channel slope ratio and intercept shift from profile `a` to `b`.
/// Quantifies aging between two calibrations of the same rig.
pub fn profile_drift(
    a: &CalibrationProfile,
    b: &CalibrationProfile,
) -> Result<Vec<ChannelDrift>, CalibrationError> {
    let ids_a: Vec<u8> = a.channels.iter().map(|c| c.channel_id).collect();
    let ids_b: Vec<u8> = b.channels.iter().map(|c| c.channel_id).collect();
    if ids_a != ids_b {
        return Err(CalibrationError::IncomparableProfiles);
    }
    Ok(a.channels
        .iter()
        .zip(&b.channels)
        .map(|(ca, cb)| ChannelDrift {
            channel_id: ca.channel_id,
            slope_ratio: cb.slope / ca.slope,
            intercept_delta: cb.intercept - ca.intercept,
        })
        .collect())
}
