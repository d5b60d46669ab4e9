//! Object-level quantities from calibrated channel readings: sectional
//! diameter, strain, contact force, and the soft/rigid call.
//!
//! Channels are read in opposing pairs. The two intermediate pairs sit at the
//! finger midpoints and carry the displacement signal; their disagreement and
//! range statuses double as anomaly detectors for lateral bending and for
//! objects that never engage one side of the gripper.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationProfile, RangeStatus};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EstimationError {
    #[error("channel {0} missing from voltages or profile")]
    MissingChannel(u8),
    #[error("invalid pair map: {0}")]
    BadPairMap(String),
    #[error("gap at contact must be positive, got {0}")]
    BadGap(f64),
    #[error("estimated diameter must be positive, got {0}")]
    NonPositiveDiameter(f64),
    #[error("displacement {d} mm outside force curve domain [{lo}, {hi}]")]
    OutsideCurveDomain { d: f64, lo: f64, hi: f64 },
    #[error("invalid force curve: {0}")]
    BadCurve(String),
}

/// Signatures that make a single grasp estimate suspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anomaly {
    BelowValidRange,
    AboveValidRange,
    PairDisagreement,
    ContactShadowing,
}

impl fmt::Display for Anomaly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Anomaly::BelowValidRange => "below-valid-range",
            Anomaly::AboveValidRange => "above-valid-range",
            Anomaly::PairDisagreement => "pair-disagreement",
            Anomaly::ContactShadowing => "contact-shadowing",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    Soft,
    Rigid,
    Unrecognizable,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Soft => "soft",
            Classification::Rigid => "rigid",
            Classification::Unrecognizable => "unrecognizable",
        })
    }
}

/// Strain is only defined once the midpoint displacement has entered the
/// calibrated interval; before that the sensor is blind and the value would
/// be an artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strain {
    Measurable(f64),
    Unmeasurable,
}

impl Strain {
    pub fn value(&self) -> Option<f64> {
        match self {
            Strain::Measurable(s) => Some(*s),
            Strain::Unmeasurable => None,
        }
    }
}

impl fmt::Display for Strain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strain::Measurable(s) => write!(f, "{s:.6}"),
            Strain::Unmeasurable => f.write_str("unmeasurable"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SortingBoundary {
    /// Estimated strain at or above this is called soft.
    pub strain_threshold: f64,
}

impl Default for SortingBoundary {
    fn default() -> Self {
        SortingBoundary {
            strain_threshold: 0.10,
        }
    }
}

/// Which channels form opposing sensor pairs, and which two pairs sit at the
/// finger midpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMap {
    pub pairs: Vec<Vec<u8>>,
    /// Indices into `pairs` of the two midpoint pairs used for aggregation.
    pub intermediate: [usize; 2],
}

impl Default for PairMap {
    fn default() -> Self {
        PairMap {
            pairs: vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]],
            intermediate: [1, 2],
        }
    }
}

impl PairMap {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if self.pairs.iter().any(|p| p.is_empty()) {
            return Err(EstimationError::BadPairMap("empty pair".into()));
        }
        let [a, b] = self.intermediate;
        if a >= self.pairs.len() || b >= self.pairs.len() || a == b {
            return Err(EstimationError::BadPairMap(format!(
                "intermediate indices {a}/{b} out of range for {} pairs",
                self.pairs.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for ch in self.pairs.iter().flatten() {
            if !seen.insert(*ch) {
                return Err(EstimationError::BadPairMap(format!(
                    "channel {ch} appears in two pairs"
                )));
            }
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Piecewise-linear finger force over midpoint displacement, per fingertip.
/// `finger_multiplicity` scales it to the full gripper (a dual-finger build
/// presses from both sides at once).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceCurve {
    samples: Vec<(f64, f64)>,
    pub finger_multiplicity: u8,
}

impl ForceCurve {
    pub fn new(samples: Vec<(f64, f64)>, finger_multiplicity: u8) -> Result<Self, EstimationError> {
        let curve = ForceCurve {
            samples,
            finger_multiplicity,
        };
        curve.validate()?;
        Ok(curve)
    }

    /// Re-check the constructor invariants; needed after deserialization,
    /// which does not go through `new`.
    pub fn validate(&self) -> Result<(), EstimationError> {
        if self.samples.len() < 2 {
            return Err(EstimationError::BadCurve(format!(
                "need >= 2 samples, got {}",
                self.samples.len()
            )));
        }
        if self.finger_multiplicity == 0 {
            return Err(EstimationError::BadCurve("finger_multiplicity is 0".into()));
        }
        for w in self.samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(EstimationError::BadCurve(
                    "displacements must be strictly increasing".into(),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(EstimationError::BadCurve(
                    "forces must be non-decreasing".into(),
                ));
            }
        }
        if self
            .samples
            .iter()
            .any(|(d, f)| !d.is_finite() || !f.is_finite())
        {
            return Err(EstimationError::BadCurve("non-finite sample".into()));
        }
        Ok(())
    }

    /// Default bench curve used when no measured curve is configured.
    pub fn default_synthetic() -> Self {
        ForceCurve::new(vec![(0.0, 0.0), (5.0, 1.0), (30.0, 6.0)], 2)
            .expect("static curve is valid")
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.samples[0].0, self.samples[self.samples.len() - 1].0)
    }

    /// Per-fingertip force at a displacement inside the curve domain.
    pub fn force_per_finger(&self, d: f64) -> Result<f64, EstimationError> {
        let (lo, hi) = self.domain();
        if !(lo..=hi).contains(&d) {
            return Err(EstimationError::OutsideCurveDomain { d, lo, hi });
        }
        for w in self.samples.windows(2) {
            let ((d0, f0), (d1, f1)) = (w[0], w[1]);
            if d <= d1 {
                return Ok(f0 + (f1 - f0) * (d - d0) / (d1 - d0));
            }
        }
        Ok(self.samples[self.samples.len() - 1].1)
    }

    /// Smallest displacement whose per-fingertip force reaches `force`, if the
    /// curve gets there at all.
    pub fn displacement_at_force(&self, force: f64) -> Option<f64> {
        if force <= self.samples[0].1 {
            return Some(self.samples[0].0);
        }
        for w in self.samples.windows(2) {
            let ((d0, f0), (d1, f1)) = (w[0], w[1]);
            if force <= f1 {
                // f1 > f0 here: force > f0 was established by the windows
                // before this one, so the segment is not flat.
                return Some(d0 + (d1 - d0) * (force - f0) / (f1 - f0));
            }
        }
        None
    }
}

/// Full per-grasp pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspEstimate {
    /// Mean displacement per sensor pair, in pair-map order, mm.
    pub pair_displacements: Vec<f64>,
    /// Aggregate midpoint displacement over the trusted intermediate pairs, mm.
    pub midpoint_displacement: f64,
    pub estimated_diameter: f64,
    pub estimated_strain: Strain,
    pub estimated_force: f64,
    pub classification: Classification,
    pub anomalies: BTreeSet<Anomaly>,
}

/// Everything the estimator needs besides the calibration profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub n_active_fingers: u8,
    pub pair_map: PairMap,
    pub force_curve: ForceCurve,
    pub boundary: SortingBoundary,
    /// Two intermediate pair values further apart than this flag lateral
    /// bending, mm.
    pub pair_disagreement_tol_mm: f64,
    /// Guard band against the blind ends of the valid interval, mm. Readings
    /// taken before the linear band begins invert to exactly its lower edge,
    /// and saturated readings invert to exactly its upper edge, so a strict
    /// comparison cannot tell "just inside" from "never got there". A pair is
    /// only trusted once it clears the edge by this much.
    pub boundary_guard_mm: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            n_active_fingers: 2,
            pair_map: PairMap::default(),
            force_curve: ForceCurve::default_synthetic(),
            boundary: SortingBoundary::default(),
            pair_disagreement_tol_mm: 4.0,
            boundary_guard_mm: 1.0,
        }
    }
}

/// Pair-level view of one steady state.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAggregate {
    pub pair_displacements: Vec<f64>,
    pub midpoint_displacement: f64,
    /// No intermediate pair cleared the lower guard band: the midpoint value
    /// is a rest-band artifact and strain must not be computed from it.
    pub below_valid_range: bool,
    pub anomalies: BTreeSet<Anomaly>,
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

/// Convert steady channel voltages to pair displacements and one midpoint
/// aggregate.
///
/// Each pair value is the mean of its channels' inverted displacements. The
/// midpoint is averaged over the intermediate pairs that cleared both guard
/// bands; when a pair is blind (not reached, or saturated) while its sibling
/// is trusted, only the trusted one speaks for the midpoint. Disagreement is
/// only flagged between two trusted pairs: a blind pair cannot witness
/// lateral bending.
pub fn aggregate_pairs(
    profile: &CalibrationProfile,
    steady_voltages: &[f64],
    cfg: &EstimationConfig,
) -> Result<PairAggregate, EstimationError> {
    cfg.pair_map.validate()?;
    let interval = profile.valid_interval;
    let mut anomalies = BTreeSet::new();
    let mut pair_values = Vec::with_capacity(cfg.pair_map.pairs.len());
    for pair in &cfg.pair_map.pairs {
        let mut sum = 0.0;
        for &ch in pair {
            let v = steady_voltages
                .get(ch as usize)
                .copied()
                .ok_or(EstimationError::MissingChannel(ch))?;
            let reading = profile
                .voltage_to_displacement(ch, v)
                .map_err(|_| EstimationError::MissingChannel(ch))?;
            match reading.status {
                RangeStatus::BelowRange => {
                    anomalies.insert(Anomaly::BelowValidRange);
                }
                RangeStatus::AboveRange => {
                    anomalies.insert(Anomaly::AboveValidRange);
                }
                RangeStatus::InRange => {}
            }
            sum += reading.displacement_mm;
        }
        pair_values.push(sum / pair.len() as f64);
    }

    let reached = |d: f64| d > interval.lo_mm + cfg.boundary_guard_mm;
    let saturated = |d: f64| d >= interval.hi_mm - cfg.boundary_guard_mm;
    let trusted = |d: f64| reached(d) && !saturated(d);

    let [ia, ib] = cfg.pair_map.intermediate;
    let (a, b) = (pair_values[ia], pair_values[ib]);
    let trusted_vals: Vec<f64> = [a, b].into_iter().filter(|d| trusted(*d)).collect();
    let midpoint = if trusted_vals.is_empty() {
        (a + b) / 2.0
    } else {
        trusted_vals.iter().sum::<f64>() / trusted_vals.len() as f64
    };
    if trusted(a) && trusted(b) && (a - b).abs() > cfg.pair_disagreement_tol_mm {
        anomalies.insert(Anomaly::PairDisagreement);
    }
    let below_valid_range = !reached(a) && !reached(b);
    if below_valid_range {
        anomalies.insert(Anomaly::BelowValidRange);
    }
    Ok(PairAggregate {
        pair_displacements: pair_values,
        midpoint_displacement: midpoint,
        below_valid_range,
        anomalies,
    })
}

/// Compressed sectional diameter under grasp force: the gripper gap at steady
/// state plus what each active finger gave up to deformation.
///
/// Callers pass non-negative inputs.
pub fn estimate_diameter(
    midpoint_displacement_mm: f64,
    gap_at_steady_mm: f64,
    n_active_fingers: u8,
) -> f64 {
    gap_at_steady_mm + n_active_fingers as f64 * midpoint_displacement_mm
}

/// Object strain: fractional width lost between first contact and steady
/// state, clamped below at zero. `below_valid_range` marks the displacement
/// as a rest-band artifact and makes the strain unmeasurable.
pub fn estimate_strain(
    gap_at_contact_mm: f64,
    estimated_diameter_mm: f64,
    below_valid_range: bool,
) -> Result<Strain, EstimationError> {
    if !(gap_at_contact_mm > 0.0) {
        return Err(EstimationError::BadGap(gap_at_contact_mm));
    }
    if below_valid_range {
        return Ok(Strain::Unmeasurable);
    }
    if !(estimated_diameter_mm > 0.0) {
        return Err(EstimationError::NonPositiveDiameter(estimated_diameter_mm));
    }
    let strain = (gap_at_contact_mm - estimated_diameter_mm) / gap_at_contact_mm;
    Ok(Strain::Measurable(strain.max(0.0)))
}

/// Gripper contact force at a midpoint displacement: per-fingertip curve
/// value times the finger multiplicity.
pub fn estimate_force(
    curve: &ForceCurve,
    midpoint_displacement_mm: f64,
) -> Result<f64, EstimationError> {
    Ok(curve.force_per_finger(midpoint_displacement_mm)? * curve.finger_multiplicity as f64)
}

pub fn classify(strain: Strain, boundary: &SortingBoundary) -> Classification {
    match strain {
        Strain::Unmeasurable => Classification::Unrecognizable,
        Strain::Measurable(s) if s >= boundary.strain_threshold => Classification::Soft,
        Strain::Measurable(_) => Classification::Rigid,
    }
}

/// One pair touching the object while another never leaves the blind band is
/// the signature of a stepped object whose wide part stops the gripper before
/// the narrow part is reached.
pub fn detect_contact_shadowing(
    pair_displacements: &[f64],
    valid_lo_mm: f64,
    guard_mm: f64,
) -> bool {
    if pair_displacements.len() < 2 {
        return false;
    }
    let reached = |d: &&f64| **d > valid_lo_mm + guard_mm;
    pair_displacements.iter().any(|d| reached(&d))
        && pair_displacements.iter().any(|d| !reached(&d))
}

/// Run the whole estimation pipeline for one steady state.
///
/// `gap_at_contact_mm` and `gap_at_steady_mm` come from the gripper; the
/// voltages come from the sensor channels. The force lookup clamps the
/// midpoint into the curve domain so a saturated reading still reports the
/// boundary force instead of failing.
pub fn estimate_grasp(
    profile: &CalibrationProfile,
    steady_voltages: &[f64],
    gap_at_contact_mm: f64,
    gap_at_steady_mm: f64,
    cfg: &EstimationConfig,
) -> Result<GraspEstimate, EstimationError> {
    let agg = aggregate_pairs(profile, steady_voltages, cfg)?;
    let mut anomalies = agg.anomalies.clone();
    if detect_contact_shadowing(
        &agg.pair_displacements,
        profile.valid_interval.lo_mm,
        cfg.boundary_guard_mm,
    ) {
        anomalies.insert(Anomaly::ContactShadowing);
    }
    let midpoint = agg.midpoint_displacement.max(0.0);
    let diameter = estimate_diameter(midpoint, gap_at_steady_mm, cfg.n_active_fingers);
    let strain = estimate_strain(gap_at_contact_mm, diameter, agg.below_valid_range)?;
    let (curve_lo, curve_hi) = cfg.force_curve.domain();
    let force = estimate_force(&cfg.force_curve, midpoint.clamp(curve_lo, curve_hi))?;
    let classification = classify(strain, &cfg.boundary);
    Ok(GraspEstimate {
        pair_displacements: agg.pair_displacements,
        midpoint_displacement: agg.midpoint_displacement,
        estimated_diameter: diameter,
        estimated_strain: strain,
        estimated_force: force,
        classification,
        anomalies,
    })
}
