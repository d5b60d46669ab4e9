//! Closed-loop grasp simulator: seeded object sets, quasi-static gripper
//! mechanics against a linear-spring object, and synthetic channel traces
//! through the sensor forward model.
//!
//! Mechanics convention: once the fingers touch an object of width `D`, any
//! further commanded closure `x` (overtravel) splits between fingertip
//! deformation and object compression, `x = n_active * d_mid + c`. The
//! encoder gap is then `D - x`, and the compressed object width is `D - c`.
//! Quasi-static equilibrium balances the fingertip force curve against the
//! object spring, `f(d_mid) = stiffness * c`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationProfile, CalibrationSample};
use crate::estimation::{
    estimate_grasp, Anomaly, Classification, EstimationConfig, EstimationError, ForceCurve,
    GraspEstimate, Strain,
};
use crate::sensor::{SensorChannelModel, SensorError, SensorReading};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("no objects to sort")]
    NoObjects,
    #[error("object {id}: force curve tops out below the object load at overtravel {x_mm} mm")]
    CurveExhausted { id: u32, x_mm: f64 },
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

/// Deterministic seed derivation (splitmix64 finalizer). Every stream in an
/// experiment hangs off the run seed through this, so episodes are
/// reproducible independently of iteration order.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    Prismatic,
    Sphere,
    Slender,
    Irregular,
}

impl std::fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeClass::Prismatic => "prismatic",
            ShapeClass::Sphere => "sphere",
            ShapeClass::Slender => "slender",
            ShapeClass::Irregular => "irregular",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraspOutcome {
    /// Force setpoint reached with the object held.
    Held,
    /// Object escaped the fingers; no stable contact was ever made.
    Slipped,
    /// Gripper hit its minimum gap before the force setpoint.
    ForceShortfall,
}

impl std::fmt::Display for GraspOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GraspOutcome::Held => "held",
            GraspOutcome::Slipped => "slipped",
            GraspOutcome::ForceShortfall => "force-shortfall",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u32,
    pub name: String,
    pub shape_class: ShapeClass,
    /// Uncompressed width across the grasp axis, mm.
    pub true_diameter_mm: f64,
    /// Linear spring constant; large means rigid. N/mm.
    pub stiffness_n_per_mm: f64,
    pub graspable: bool,
    /// Per-pair contact fraction of the midpoint deformation, pair-map order.
    /// 1.0 = full contact at the sensing section; near 0 = that section never
    /// touches the object.
    pub pair_contact: Vec<f64>,
    /// Ground-truth strain at the operating point, recorded for scoring.
    pub true_strain_at_force: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperConfig {
    pub max_gap_mm: f64,
    pub min_gap_mm: f64,
    pub closing_speed_mm_s: f64,
    pub sample_rate_hz: f64,
    /// Total grasp force (all fingers) at which closure stops, N.
    pub force_setpoint_n: f64,
    /// The approach phase is simulated from this far above the contact gap.
    pub approach_clearance_mm: f64,
    /// Samples held at the end of closure; their mean is the steady voltage.
    pub steady_hold_samples: usize,
    pub n_active_fingers: u8,
}

impl Default for GripperConfig {
    fn default() -> Self {
        GripperConfig {
            max_gap_mm: 160.0,
            min_gap_mm: 0.0,
            closing_speed_mm_s: 50.0,
            sample_rate_hz: 100.0,
            force_setpoint_n: 8.0,
            approach_clearance_mm: 10.0,
            steady_hold_samples: 20,
            n_active_fingers: 2,
        }
    }
}

/// Disturbance magnitudes applied per episode, plus the contact-geometry
/// factors used when generating non-prismatic objects. Frozen defaults; all
/// overridable through config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimTuning {
    /// Per-channel ambient light offset drawn uniformly from +-this, V.
    pub ambient_drift_v: f64,
    /// Relative per-pair contact noise (one normal draw per pair per grasp).
    pub grasp_noise_rel: f64,
    /// Sphere curvature skew: the off-center intermediate pair sees
    /// (1 - 2*skew) of the midpoint deformation, outer pairs (1 - skew).
    pub sphere_skew: f64,
    /// Contact fraction at sections shadowed by a wider part of the object.
    pub shadow_contact: f64,
}

impl Default for SimTuning {
    fn default() -> Self {
        SimTuning {
            ambient_drift_v: 0.15,
            grasp_noise_rel: 0.03,
            sphere_skew: 0.30,
            shadow_contact: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMix {
    pub rigid_prismatic: usize,
    pub soft_prismatic: usize,
    pub spheres: usize,
    pub irregular: usize,
    pub slender: usize,
}

impl Default for ObjectMix {
    fn default() -> Self {
        ObjectMix {
            rigid_prismatic: 26,
            soft_prismatic: 9,
            spheres: 2,
            irregular: 1,
            slender: 4,
        }
    }
}

impl ObjectMix {
    pub fn total(&self) -> usize {
        self.rigid_prismatic + self.soft_prismatic + self.spheres + self.irregular + self.slender
    }
}

/// Steady-state solution of one grasp.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SteadyState {
    outcome: GraspOutcome,
    /// Commanded closure beyond the contact gap, mm.
    overtravel_mm: f64,
    midpoint_mm: f64,
    compression_mm: f64,
    per_finger_force_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspEpisode {
    pub object: ObjectSpec,
    pub outcome: GraspOutcome,
    /// Encoder gap at first touch, mm (the object's uncompressed width).
    pub gap_at_contact_mm: f64,
    /// Encoder gap once closure stops, mm.
    pub gap_at_steady_mm: f64,
    pub true_midpoint_mm: f64,
    pub true_compression_mm: f64,
    pub true_strain: f64,
    pub per_finger_force_n: f64,
    /// One trace per channel, channel order.
    pub traces: Vec<Vec<SensorReading>>,
    /// Mean of the last `steady_hold_samples` voltages per channel.
    pub steady_voltages: Vec<f64>,
    pub seed: u64,
}

const BISECT_TOL_MM: f64 = 1e-12;

/// Fingertip/object equilibrium at a given overtravel: find d with
/// f(d) = k * (x - n*d). The left side rises and the right side falls in d,
/// so the root is unique; bisection to 1e-12 mm keeps the force residual
/// far below a micronewton for any configured stiffness.
fn equilibrium_midpoint(
    curve: &ForceCurve,
    stiffness: f64,
    overtravel: f64,
    n_active: f64,
) -> Option<f64> {
    let (_, curve_hi) = curve.domain();
    let upper = (overtravel / n_active).min(curve_hi);
    let load = |d: f64| stiffness * (overtravel - n_active * d);
    let f = |d: f64| curve.force_per_finger(d).expect("d stays inside domain");
    if f(upper) < load(upper) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, upper);
    while hi - lo > BISECT_TOL_MM {
        let mid = 0.5 * (lo + hi);
        if f(mid) < load(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn solve_steady(
    object: &ObjectSpec,
    gripper: &GripperConfig,
    curve: &ForceCurve,
) -> Result<SteadyState, SimError> {
    if !object.graspable {
        return Ok(SteadyState {
            outcome: GraspOutcome::Slipped,
            overtravel_mm: (object.true_diameter_mm - gripper.min_gap_mm).max(0.0),
            midpoint_mm: 0.0,
            compression_mm: 0.0,
            per_finger_force_n: 0.0,
        });
    }
    let n = gripper.n_active_fingers as f64;
    let k = object.stiffness_n_per_mm;
    let x_max = object.true_diameter_mm - gripper.min_gap_mm;
    let per_finger_target = gripper.force_setpoint_n / curve.finger_multiplicity as f64;
    if let Some(d_target) = curve.displacement_at_force(per_finger_target) {
        let c_target = per_finger_target / k;
        let x_target = n * d_target + c_target;
        if x_target <= x_max {
            return Ok(SteadyState {
                outcome: GraspOutcome::Held,
                overtravel_mm: x_target,
                midpoint_mm: d_target,
                compression_mm: c_target,
                per_finger_force_n: per_finger_target,
            });
        }
    }
    // Setpoint unreachable before the gap floor: press to the floor and take
    // whatever equilibrium holds there.
    let d = equilibrium_midpoint(curve, k, x_max, n).ok_or(SimError::CurveExhausted {
        id: object.id,
        x_mm: x_max,
    })?;
    Ok(SteadyState {
        outcome: GraspOutcome::ForceShortfall,
        overtravel_mm: x_max,
        midpoint_mm: d,
        compression_mm: x_max - n * d,
        per_finger_force_n: curve.force_per_finger(d).expect("d inside domain"),
    })
}

/// Simulate one grasp and the channel traces it produces.
pub fn run_grasp(
    object: &ObjectSpec,
    rig: &[SensorChannelModel],
    gripper: &GripperConfig,
    curve: &ForceCurve,
    est_cfg: &EstimationConfig,
    tuning: &SimTuning,
    seed: u64,
) -> Result<GraspEpisode, SimError> {
    if gripper.closing_speed_mm_s <= 0.0 || gripper.sample_rate_hz <= 0.0 {
        return Err(SimError::BadConfig(
            "closing speed and sample rate must be positive".into(),
        ));
    }
    let pair_map = &est_cfg.pair_map;
    if pair_map.channel_count() != rig.len() {
        return Err(SimError::BadConfig(format!(
            "pair map covers {} channels, rig has {}",
            pair_map.channel_count(),
            rig.len()
        )));
    }
    let steady = solve_steady(object, gripper, curve)?;
    let n = gripper.n_active_fingers as f64;

    // One contact-noise draw per pair per grasp; fabrication of the grasp
    // geometry, not of the sensor.
    let contact_eff: Vec<f64> = (0..pair_map.pairs.len())
        .map(|p| {
            let base = object.pair_contact.get(p).copied().unwrap_or(1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 100 + p as u64));
            let noise = Normal::new(0.0, tuning.grasp_noise_rel)
                .expect("sigma is finite")
                .sample(&mut rng);
            (base * (1.0 + noise)).max(0.0)
        })
        .collect();

    let v = gripper.closing_speed_mm_s;
    let dt_ms = 1000.0 / gripper.sample_rate_hz;
    let t_contact_ms = gripper.approach_clearance_mm / v * 1000.0;
    let t_press_ms = steady.overtravel_mm / v * 1000.0;
    let t_hold_ms = (gripper.steady_hold_samples as f64 + 2.0) * dt_ms;
    let t_end_ms = t_contact_ms + t_press_ms + t_hold_ms;

    // Midpoint displacement over time, one knot per sample instant during the
    // press so the piecewise-linear path tracks the equilibrium curve.
    let mut midpoint_knots: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    if t_contact_ms > 0.0 {
        midpoint_knots.push((t_contact_ms, 0.0));
    }
    if steady.outcome == GraspOutcome::Slipped {
        midpoint_knots.push((t_end_ms, 0.0));
    } else {
        let mut t = t_contact_ms + dt_ms;
        while t < t_contact_ms + t_press_ms - 1e-9 {
            let x = v * (t - t_contact_ms) / 1000.0;
            let d = equilibrium_midpoint(curve, object.stiffness_n_per_mm, x, n).ok_or(
                SimError::CurveExhausted {
                    id: object.id,
                    x_mm: x,
                },
            )?;
            midpoint_knots.push((t, d));
            t += dt_ms;
        }
        midpoint_knots.push((t_contact_ms + t_press_ms, steady.midpoint_mm));
        midpoint_knots.push((t_end_ms, steady.midpoint_mm));
    }

    let mut traces = Vec::with_capacity(rig.len());
    for (ch, base_model) in rig.iter().enumerate() {
        let pair_idx = pair_map
            .pairs
            .iter()
            .position(|p| p.contains(&(ch as u8)))
            .ok_or_else(|| SimError::BadConfig(format!("channel {ch} not in any pair")))?;
        let mut drift_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 200 + ch as u64));
        let drift = drift_rng.gen_range(-tuning.ambient_drift_v..=tuning.ambient_drift_v);
        let mut model = base_model.clone();
        model.ambient_offset += drift;
        model.rng_seed = mix_seed(seed, 300 + ch as u64);
        let path: Vec<(f64, f64)> = midpoint_knots
            .iter()
            .map(|(t, d)| (*t, (contact_eff[pair_idx] * d).min(model.d_max)))
            .collect();
        traces.push(model.sample_trace(&path, gripper.sample_rate_hz, true)?);
    }

    let hold = gripper.steady_hold_samples.max(1);
    let steady_voltages: Vec<f64> = traces
        .iter()
        .map(|trace| {
            let tail = &trace[trace.len().saturating_sub(hold)..];
            tail.iter().map(|r| r.voltage).sum::<f64>() / tail.len() as f64
        })
        .collect();

    let gap_at_steady = match steady.outcome {
        GraspOutcome::Slipped => gripper.min_gap_mm,
        _ => object.true_diameter_mm - steady.overtravel_mm,
    };
    let true_strain = match steady.outcome {
        GraspOutcome::Slipped => 0.0,
        _ => steady.compression_mm / object.true_diameter_mm,
    };
    Ok(GraspEpisode {
        object: object.clone(),
        outcome: steady.outcome,
        gap_at_contact_mm: object.true_diameter_mm,
        gap_at_steady_mm: gap_at_steady,
        true_midpoint_mm: steady.midpoint_mm,
        true_compression_mm: steady.compression_mm,
        true_strain,
        per_finger_force_n: steady.per_finger_force_n,
        traces,
        steady_voltages,
        seed,
    })
}

// ---------------------------------------------------------------------------
// object generation
// ---------------------------------------------------------------------------

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Generate the seeded object set for a sorting run. The default mix is 26
/// rigid prismatic objects, 9 soft prismatic (one moderately soft block that
/// stays measurable, the rest so soft the finger never reaches its linear
/// band), 2 rigid spheres, 1 irregular stepped-width object, and 4 slender
/// rods that cannot be grasped.
pub fn generate_object_set(
    mix: &ObjectMix,
    gripper: &GripperConfig,
    curve: &ForceCurve,
    tuning: &SimTuning,
    seed: u64,
) -> Vec<ObjectSpec> {
    let mut out = Vec::with_capacity(mix.total());
    let mut id = 0u32;
    let full_contact = vec![1.0, 1.0, 1.0, 1.0];
    let mut push = |spec: ObjectSpec| out.push(spec);

    for i in 0..mix.rigid_prismatic {
        id += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 10_000 + id as u64));
        push(make_spec(
            id,
            format!("box-{:02}", i + 1),
            ShapeClass::Prismatic,
            rng.gen_range(50.0..100.0),
            log_uniform(&mut rng, 10.0, 200.0),
            true,
            full_contact.clone(),
            gripper,
            curve,
        ));
    }
    for i in 0..mix.soft_prismatic {
        id += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 10_000 + id as u64));
        let (name, d, k) = if i == 0 {
            // One block stiff enough that its midpoint displacement lands
            // inside the linear band even though the setpoint is unreachable.
            (
                "foam-01".to_string(),
                rng.gen_range(58.0..65.0),
                rng.gen_range(0.044..0.048),
            )
        } else {
            (
                format!("plush-{:02}", i),
                rng.gen_range(40.0..75.0),
                log_uniform(&mut rng, 0.004, 0.011),
            )
        };
        push(make_spec(
            id,
            name,
            ShapeClass::Prismatic,
            d,
            k,
            true,
            full_contact.clone(),
            gripper,
            curve,
        ));
    }
    for i in 0..mix.spheres {
        id += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 10_000 + id as u64));
        let s = tuning.sphere_skew;
        // The fingers land off the equator: the first intermediate pair sees
        // the full midpoint deformation, its sibling much less, and the
        // outer pairs something in between.
        let contact = vec![1.0 - s, 1.0, 1.0 - 2.0 * s, 1.0 - s];
        push(make_spec(
            id,
            format!("ball-{:02}", i + 1),
            ShapeClass::Sphere,
            rng.gen_range(60.0..70.0),
            log_uniform(&mut rng, 80.0, 200.0),
            true,
            contact,
            gripper,
            curve,
        ));
    }
    for i in 0..mix.irregular {
        id += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 10_000 + id as u64));
        // Wide body under the first two pairs; the narrow neck under the
        // others is shadowed and never touched.
        let contact = vec![1.0, 1.0, tuning.shadow_contact, tuning.shadow_contact];
        push(make_spec(
            id,
            format!("bottle-{:02}", i + 1),
            ShapeClass::Irregular,
            rng.gen_range(75.0..85.0),
            log_uniform(&mut rng, 80.0, 120.0),
            true,
            contact,
            gripper,
            curve,
        ));
    }
    for i in 0..mix.slender {
        id += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 10_000 + id as u64));
        push(make_spec(
            id,
            format!("rod-{:02}", i + 1),
            ShapeClass::Slender,
            rng.gen_range(4.0..10.0),
            500.0,
            false,
            vec![0.0, 0.0, 0.0, 0.0],
            gripper,
            curve,
        ));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn make_spec(
    id: u32,
    name: String,
    shape_class: ShapeClass,
    true_diameter_mm: f64,
    stiffness_n_per_mm: f64,
    graspable: bool,
    pair_contact: Vec<f64>,
    gripper: &GripperConfig,
    curve: &ForceCurve,
) -> ObjectSpec {
    let mut spec = ObjectSpec {
        id,
        name,
        shape_class,
        true_diameter_mm,
        stiffness_n_per_mm,
        graspable,
        pair_contact,
        true_strain_at_force: 0.0,
    };
    if let Ok(steady) = solve_steady(&spec, gripper, curve) {
        if steady.outcome != GraspOutcome::Slipped {
            spec.true_strain_at_force = steady.compression_mm / true_diameter_mm;
        }
    }
    spec
}

// ---------------------------------------------------------------------------
// plate calibration simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateRunConfig {
    pub plate_widths_mm: Vec<f64>,
    pub commanded_gap_mm: f64,
    pub repetitions: usize,
    pub hold_samples: usize,
    pub sample_rate_hz: f64,
}

impl Default for PlateRunConfig {
    fn default() -> Self {
        PlateRunConfig {
            plate_widths_mm: vec![50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
            commanded_gap_mm: 40.0,
            repetitions: 3,
            hold_samples: 20,
            sample_rate_hz: 100.0,
        }
    }
}

/// Grasp each plate at the commanded gap and record per-channel steady
/// voltages, the raw material for `calibrate`.
pub fn simulate_plate_calibration(
    rig: &[SensorChannelModel],
    plates: &PlateRunConfig,
    n_deforming_fingers: u8,
    seed: u64,
) -> Result<Vec<CalibrationSample>, SimError> {
    if plates.repetitions == 0 || plates.hold_samples == 0 {
        return Err(SimError::BadConfig(
            "repetitions and hold_samples must be nonzero".into(),
        ));
    }
    let hold_ms = plates.hold_samples as f64 * 1000.0 / plates.sample_rate_hz;
    let mut samples = Vec::with_capacity(plates.plate_widths_mm.len() * plates.repetitions);
    for (pi, &width) in plates.plate_widths_mm.iter().enumerate() {
        let displacement =
            (width - plates.commanded_gap_mm) / n_deforming_fingers as f64;
        for rep in 0..plates.repetitions {
            let mut voltages = Vec::with_capacity(rig.len());
            for (ch, base_model) in rig.iter().enumerate() {
                let mut model = base_model.clone();
                model.rng_seed = mix_seed(
                    seed,
                    (pi as u64) << 32 | (rep as u64) << 16 | ch as u64,
                );
                let path = [(0.0, displacement), (hold_ms, displacement)];
                let trace = model.sample_trace(&path, plates.sample_rate_hz, true)?;
                voltages.push(
                    trace.iter().map(|r| r.voltage).sum::<f64>() / trace.len() as f64,
                );
            }
            let sample = CalibrationSample::new(
                width,
                plates.commanded_gap_mm,
                n_deforming_fingers,
                voltages,
                1,
            )
            .map_err(|e| SimError::BadConfig(e.to_string()))?;
            samples.push(sample);
        }
    }
    Ok(samples)
}

/// Build the physical channel set: the base model with per-channel
/// fabrication spread. Calibration and sorting must see the same rig, so
/// both derive it from the same rig seed.
pub fn build_rig(
    base: &SensorChannelModel,
    n_channels: u8,
    gain_spread: f64,
    offset_spread: f64,
    rig_seed: u64,
) -> Vec<SensorChannelModel> {
    (0..n_channels)
        .map(|ch| {
            base.clone().with_channel_id(ch).with_fabrication_variation(
                mix_seed(rig_seed, ch as u64),
                gain_spread,
                offset_spread,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// sorting experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRow {
    pub object_id: u32,
    pub name: String,
    pub shape_class: ShapeClass,
    pub graspable: bool,
    pub outcome: GraspOutcome,
    pub true_diameter_mm: f64,
    pub estimated_diameter_mm: f64,
    pub true_strain: f64,
    pub estimated_strain: Strain,
    pub estimated_force_n: f64,
    pub true_class: Classification,
    pub classification: Classification,
    pub anomalies: std::collections::BTreeSet<Anomaly>,
}

/// Aggregate metrics over one sorting run. Fractions are over the stated
/// denominators; a zero denominator yields zero with its count alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_objects: usize,
    pub n_graspable: usize,
    pub n_slipped: usize,
    pub n_unrecognizable: usize,
    /// Of true-rigid prismatic objects, the fraction with diameter error
    /// within 6 mm.
    pub rigid_prismatic_within_6mm: f64,
    pub n_rigid_prismatic: usize,
    /// Mean |diameter error| over held true-rigid objects, mm.
    pub mean_abs_diameter_error_mm: f64,
    pub n_diameter_scored: usize,
    /// Of objects with measurable strain, the fraction within 0.1.
    pub measurable_strain_within_0p1: f64,
    pub n_measurable_strain: usize,
    pub mean_abs_strain_error: f64,
    /// Fraction of graspable objects whose classification matches truth.
    pub classification_success: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[ObjectRow]) -> Aggregates {
        let frac = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let rigid_prismatic: Vec<&ObjectRow> = rows
            .iter()
            .filter(|r| {
                r.graspable
                    && r.shape_class == ShapeClass::Prismatic
                    && r.true_class == Classification::Rigid
            })
            .collect();
        let within_6 = rigid_prismatic
            .iter()
            .filter(|r| (r.estimated_diameter_mm - r.true_diameter_mm).abs() <= 6.0)
            .count();
        let diameter_scored: Vec<&ObjectRow> = rows
            .iter()
            .filter(|r| {
                r.graspable
                    && r.true_class == Classification::Rigid
                    && r.outcome != GraspOutcome::Slipped
            })
            .collect();
        let diam_err_sum: f64 = diameter_scored
            .iter()
            .map(|r| (r.estimated_diameter_mm - r.true_diameter_mm).abs())
            .sum();
        let measurable: Vec<(&ObjectRow, f64)> = rows
            .iter()
            .filter_map(|r| r.estimated_strain.value().map(|s| (r, s)))
            .collect();
        let strain_within = measurable
            .iter()
            .filter(|(r, s)| (s - r.true_strain).abs() <= 0.1)
            .count();
        let strain_err_sum: f64 = measurable
            .iter()
            .map(|(r, s)| (s - r.true_strain).abs())
            .sum();
        let graspable: Vec<&ObjectRow> = rows.iter().filter(|r| r.graspable).collect();
        let classified_ok = graspable
            .iter()
            .filter(|r| r.classification == r.true_class)
            .count();
        Aggregates {
            n_objects: rows.len(),
            n_graspable: graspable.len(),
            n_slipped: rows
                .iter()
                .filter(|r| r.outcome == GraspOutcome::Slipped)
                .count(),
            n_unrecognizable: rows
                .iter()
                .filter(|r| r.classification == Classification::Unrecognizable)
                .count(),
            rigid_prismatic_within_6mm: frac(within_6, rigid_prismatic.len()),
            n_rigid_prismatic: rigid_prismatic.len(),
            mean_abs_diameter_error_mm: if diameter_scored.is_empty() {
                0.0
            } else {
                diam_err_sum / diameter_scored.len() as f64
            },
            n_diameter_scored: diameter_scored.len(),
            measurable_strain_within_0p1: frac(strain_within, measurable.len()),
            n_measurable_strain: measurable.len(),
            mean_abs_strain_error: if measurable.is_empty() {
                0.0
            } else {
                strain_err_sum / measurable.len() as f64
            },
            classification_success: frac(classified_ok, graspable.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortingReport {
    pub seed: u64,
    pub rows: Vec<ObjectRow>,
    pub aggregates: Aggregates,
}

/// Grasp every object, estimate, classify, and score against ground truth.
/// Also returns the raw episodes for logging and diagnostics.
pub fn run_sorting_experiment(
    profile: &CalibrationProfile,
    objects: &[ObjectSpec],
    rig: &[SensorChannelModel],
    gripper: &GripperConfig,
    est_cfg: &EstimationConfig,
    tuning: &SimTuning,
    seed: u64,
) -> Result<(SortingReport, Vec<(GraspEpisode, GraspEstimate)>), SimError> {
    if objects.is_empty() {
        return Err(SimError::NoObjects);
    }
    let mut rows = Vec::with_capacity(objects.len());
    let mut episodes = Vec::with_capacity(objects.len());
    for object in objects {
        let episode = run_grasp(
            object,
            rig,
            gripper,
            &est_cfg.force_curve,
            est_cfg,
            tuning,
            mix_seed(seed, object.id as u64),
        )?;
        let estimate = estimate_grasp(
            profile,
            &episode.steady_voltages,
            episode.gap_at_contact_mm,
            episode.gap_at_steady_mm,
            est_cfg,
        )?;
        let true_class = if object.true_strain_at_force >= est_cfg.boundary.strain_threshold {
            Classification::Soft
        } else {
            Classification::Rigid
        };
        rows.push(ObjectRow {
            object_id: object.id,
            name: object.name.clone(),
            shape_class: object.shape_class,
            graspable: object.graspable,
            outcome: episode.outcome,
            true_diameter_mm: object.true_diameter_mm,
            estimated_diameter_mm: estimate.estimated_diameter,
            true_strain: episode.true_strain,
            estimated_strain: estimate.estimated_strain,
            estimated_force_n: estimate.estimated_force,
            true_class,
            classification: estimate.classification,
            anomalies: estimate.anomalies.clone(),
        });
        episodes.push((episode, estimate));
    }
    let aggregates = Aggregates::from_rows(&rows);
    Ok((
        SortingReport {
            seed,
            rows,
            aggregates,
        },
        episodes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate, CalibrateOptions};

    fn default_rig() -> Vec<SensorChannelModel> {
        build_rig(&SensorChannelModel::default(), 8, 0.10, 0.15, 7)
    }

    fn default_profile(rig: &[SensorChannelModel]) -> CalibrationProfile {
        let samples =
            simulate_plate_calibration(rig, &PlateRunConfig::default(), 2, 11).unwrap();
        calibrate(&samples, &CalibrateOptions::default()).unwrap()
    }

    fn rigid_box(k: f64, d: f64) -> ObjectSpec {
        make_spec(
            1,
            "box".into(),
            ShapeClass::Prismatic,
            d,
            k,
            true,
            vec![1.0; 4],
            &GripperConfig::default(),
            &ForceCurve::default_synthetic(),
        )
    }

    #[test]
    fn rigid_object_reaches_setpoint() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        let s = solve_steady(&rigid_box(100.0, 70.0), &gripper, &curve).unwrap();
        assert_eq!(s.outcome, GraspOutcome::Held);
        // 8 N split over two fingertips, curve inverse at 4 N.
        assert!((s.midpoint_mm - 20.0).abs() < 1e-9);
        assert!((s.compression_mm - 0.04).abs() < 1e-12);
        assert!((s.per_finger_force_n - 4.0).abs() < 1e-9);
        assert!((s.overtravel_mm - 40.04).abs() < 1e-9);
    }

    #[test]
    fn ultra_soft_object_never_reaches_linear_band() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        let spec = rigid_box(0.008, 60.0);
        let s = solve_steady(&spec, &gripper, &curve).unwrap();
        assert_eq!(s.outcome, GraspOutcome::ForceShortfall);
        assert!(s.midpoint_mm < 5.0, "midpoint {}", s.midpoint_mm);
        // Closed-form check: f(d) = 0.2 d balances k (x - 2 d).
        let k = 0.008;
        let expected = k * 60.0 / (0.2 + 2.0 * k);
        assert!((s.midpoint_mm - expected).abs() < 1e-9);
    }

    #[test]
    fn moderately_soft_object_stays_measurable() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        let s = solve_steady(&rigid_box(0.046, 62.0), &gripper, &curve).unwrap();
        assert_eq!(s.outcome, GraspOutcome::ForceShortfall);
        assert!(s.midpoint_mm > 8.0 && s.midpoint_mm < 11.0, "{}", s.midpoint_mm);
    }

    #[test]
    fn equilibrium_residual_is_negligible() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        for k in [0.005, 0.046, 0.5, 10.0, 200.0] {
            let s = solve_steady(&rigid_box(k, 65.0), &gripper, &curve).unwrap();
            let finger = curve.force_per_finger(s.midpoint_mm).unwrap();
            let object = k * s.compression_mm;
            assert!(
                (finger - object).abs() < 1e-6,
                "k={k}: residual {}",
                (finger - object).abs()
            );
        }
    }

    #[test]
    fn closure_identity_holds() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        let rig = default_rig();
        let cfg = EstimationConfig::default();
        let tuning = SimTuning::default();
        let ep = run_grasp(
            &rigid_box(50.0, 80.0),
            &rig,
            &gripper,
            &curve,
            &cfg,
            &tuning,
            9,
        )
        .unwrap();
        let lhs = ep.gap_at_steady_mm;
        let rhs = ep.gap_at_contact_mm
            - ep.true_compression_mm
            - gripper.n_active_fingers as f64 * ep.true_midpoint_mm;
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn slipped_object_produces_rest_traces() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        let rig = default_rig();
        let cfg = EstimationConfig::default();
        let spec = ObjectSpec {
            graspable: false,
            shape_class: ShapeClass::Slender,
            true_diameter_mm: 6.0,
            ..rigid_box(500.0, 6.0)
        };
        let ep = run_grasp(&spec, &rig, &gripper, &curve, &cfg, &SimTuning::default(), 3).unwrap();
        assert_eq!(ep.outcome, GraspOutcome::Slipped);
        assert_eq!(ep.true_midpoint_mm, 0.0);
        assert_eq!(ep.gap_at_steady_mm, gripper.min_gap_mm);
        // Steady voltages sit near each channel's rest level.
        for (ch, v) in ep.steady_voltages.iter().enumerate() {
            assert!((v - rig[ch].v_rest).abs() < 0.3, "ch {ch}: {v}");
        }
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        let rig = default_rig();
        let cfg = EstimationConfig::default();
        let tuning = SimTuning::default();
        let spec = rigid_box(80.0, 64.0);
        let a = run_grasp(&spec, &rig, &gripper, &curve, &cfg, &tuning, 42).unwrap();
        let b = run_grasp(&spec, &rig, &gripper, &curve, &cfg, &tuning, 42).unwrap();
        assert_eq!(a, b);
        let c = run_grasp(&spec, &rig, &gripper, &curve, &cfg, &tuning, 43).unwrap();
        assert_ne!(a.steady_voltages, c.steady_voltages);
    }

    #[test]
    fn trace_shape_is_uniform() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        let rig = default_rig();
        let cfg = EstimationConfig::default();
        let ep = run_grasp(
            &rigid_box(120.0, 55.0),
            &rig,
            &gripper,
            &curve,
            &cfg,
            &SimTuning::default(),
            5,
        )
        .unwrap();
        assert_eq!(ep.traces.len(), 8);
        let n = ep.traces[0].len();
        assert!(n > 100, "expected a second-plus of samples, got {n}");
        for t in &ep.traces {
            assert_eq!(t.len(), n);
        }
        let dt = ep.traces[0][1].timestamp_ms - ep.traces[0][0].timestamp_ms;
        assert!((dt - 10.0).abs() < 1e-9);
    }

    #[test]
    fn default_object_set_composition() {
        let mix = ObjectMix::default();
        let set = generate_object_set(
            &mix,
            &GripperConfig::default(),
            &ForceCurve::default_synthetic(),
            &SimTuning::default(),
            42,
        );
        assert_eq!(set.len(), 42);
        assert_eq!(set.iter().filter(|o| !o.graspable).count(), 4);
        let count = |s: ShapeClass| set.iter().filter(|o| o.shape_class == s).count();
        assert_eq!(count(ShapeClass::Prismatic), 35);
        assert_eq!(count(ShapeClass::Sphere), 2);
        assert_eq!(count(ShapeClass::Irregular), 1);
        assert_eq!(count(ShapeClass::Slender), 4);
        let ids: Vec<u32> = set.iter().map(|o| o.id).collect();
        assert_eq!(ids, (1..=42).collect::<Vec<u32>>());
        // Same seed reproduces the set; a different seed varies it.
        let again = generate_object_set(
            &mix,
            &GripperConfig::default(),
            &ForceCurve::default_synthetic(),
            &SimTuning::default(),
            42,
        );
        assert_eq!(set, again);
        let other = generate_object_set(
            &mix,
            &GripperConfig::default(),
            &ForceCurve::default_synthetic(),
            &SimTuning::default(),
            43,
        );
        assert_ne!(set, other);
    }

    #[test]
    fn ultra_soft_objects_stay_below_band_and_soft_truth_is_soft() {
        let gripper = GripperConfig::default();
        let curve = ForceCurve::default_synthetic();
        let set = generate_object_set(
            &ObjectMix::default(),
            &gripper,
            &curve,
            &SimTuning::default(),
            42,
        );
        for o in set.iter().filter(|o| o.stiffness_n_per_mm < 1.0) {
            let s = solve_steady(o, &gripper, &curve).unwrap();
            assert!(
                o.name.starts_with("foam") || s.midpoint_mm < 5.0,
                "{}: midpoint {}",
                o.name,
                s.midpoint_mm
            );
            assert!(o.true_strain_at_force >= 0.10, "{}", o.name);
        }
        for o in set.iter().filter(|o| o.stiffness_n_per_mm >= 10.0 && o.graspable) {
            assert!(o.true_strain_at_force < 0.10, "{}", o.name);
        }
    }

    #[test]
    fn plate_simulation_yields_calibratable_samples() {
        let rig = default_rig();
        let samples =
            simulate_plate_calibration(&rig, &PlateRunConfig::default(), 2, 11).unwrap();
        assert_eq!(samples.len(), 18);
        let mut displacements: Vec<f64> =
            samples.iter().map(|s| s.implied_displacement_mm).collect();
        displacements.sort_by(f64::total_cmp);
        displacements.dedup();
        assert_eq!(displacements, vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0]);
        let profile = calibrate(&samples, &CalibrateOptions::default()).unwrap();
        assert_eq!(profile.channels.len(), 8);
        for fit in &profile.channels {
            assert!(fit.r_squared > 0.99, "ch {}: {}", fit.channel_id, fit.r_squared);
            let true_slope = rig[fit.channel_id as usize].slope;
            assert!(
                (fit.slope - true_slope).abs() < 0.005,
                "ch {}: {} vs {}",
                fit.channel_id,
                fit.slope,
                true_slope
            );
        }
    }

    #[test]
    fn sorting_experiment_is_deterministic_and_scored() {
        let rig = default_rig();
        let profile = default_profile(&rig);
        let gripper = GripperConfig::default();
        let cfg = EstimationConfig::default();
        let tuning = SimTuning::default();
        let objects = generate_object_set(
            &ObjectMix::default(),
            &gripper,
            &cfg.force_curve,
            &tuning,
            42,
        );
        let (report, episodes) =
            run_sorting_experiment(&profile, &objects, &rig, &gripper, &cfg, &tuning, 42)
                .unwrap();
        assert_eq!(report.rows.len(), 42);
        assert_eq!(episodes.len(), 42);
        assert_eq!(report.aggregates, Aggregates::from_rows(&report.rows));
        assert_eq!(report.aggregates.n_slipped, 4);
        let (again, _) =
            run_sorting_experiment(&profile, &objects, &rig, &gripper, &cfg, &tuning, 42)
                .unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn empty_object_list_is_a_domain_error() {
        let rig = default_rig();
        let profile = default_profile(&rig);
        let err = run_sorting_experiment(
            &profile,
            &[],
            &rig,
            &GripperConfig::default(),
            &EstimationConfig::default(),
            &SimTuning::default(),
            1,
        )
        .unwrap_err();
        assert_eq!(err, SimError::NoObjects);
    }

    #[test]
    fn mix_seed_spreads_and_is_stable() {
        assert_eq!(mix_seed(42, 1), mix_seed(42, 1));
        assert_ne!(mix_seed(42, 1), mix_seed(42, 2));
        assert_ne!(mix_seed(42, 1), mix_seed(43, 1));
    }
}
