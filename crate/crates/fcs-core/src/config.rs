//! One JSON document for everything a run needs: sensor-model defaults,
//! rig fabrication spread, gripper geometry, force curve, estimation
//! tolerances, disturbance magnitudes, and the object mix.
//!
//! Every field has a default, so a config file only needs the fields it
//! overrides. The calibration valid interval is not a separate setting: it is
//! the sensor model's linear band, so the two can never drift apart.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrateOptions, ValidInterval};
use crate::estimation::EstimationConfig;
use crate::sensor::SensorChannelModel;
use crate::sim::{GripperConfig, ObjectMix, PlateRunConfig, SimTuning};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("config schema version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Per-rig fabrication parameters: how many channels and how much they vary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub n_channels: u8,
    /// Relative spread of per-channel slope, fraction of nominal.
    pub gain_spread: f64,
    /// Absolute spread of per-channel rest voltage, V.
    pub offset_spread: f64,
    /// Fabrication seed; fixed per physical rig so calibration and sorting
    /// address the same hardware.
    pub rig_seed: u64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            n_channels: 8,
            gain_spread: 0.10,
            offset_spread: 0.15,
            rig_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    pub r2_threshold: f64,
    pub plates: PlateRunConfig,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            r2_threshold: 0.95,
            plates: PlateRunConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub sensor: SensorChannelModel,
    pub rig: RigConfig,
    pub gripper: GripperConfig,
    pub estimation: EstimationConfig,
    pub tuning: SimTuning,
    pub mix: ObjectMix,
    pub calibration: CalibrationSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: CONFIG_SCHEMA_VERSION,
            sensor: SensorChannelModel::default(),
            rig: RigConfig::default(),
            gripper: GripperConfig::default(),
            estimation: EstimationConfig::default(),
            tuning: SimTuning::default(),
            mix: ObjectMix::default(),
            calibration: CalibrationSection::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config =
            serde_json::from_str(&text).map_err(|e| ConfigError::Malformed(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::VersionMismatch {
                found: cfg.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| ConfigError::Malformed(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        self.sensor
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.estimation
            .pair_map
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.estimation
            .force_curve
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.estimation.pair_map.channel_count() != self.rig.n_channels as usize {
            return bad(format!(
                "pair map covers {} channels but rig has {}",
                self.estimation.pair_map.channel_count(),
                self.rig.n_channels
            ));
        }
        if self.estimation.n_active_fingers != self.gripper.n_active_fingers {
            return bad(format!(
                "estimation assumes {} active fingers, gripper has {}",
                self.estimation.n_active_fingers, self.gripper.n_active_fingers
            ));
        }
        if !(0.0..1.0).contains(&self.rig.gain_spread) || self.rig.offset_spread < 0.0 {
            return bad("rig spreads out of range".into());
        }
        if self.gripper.closing_speed_mm_s <= 0.0
            || self.gripper.sample_rate_hz <= 0.0
            || self.gripper.steady_hold_samples == 0
            || self.gripper.n_active_fingers == 0
            || self.gripper.force_setpoint_n <= 0.0
            || self.gripper.min_gap_mm < 0.0
            || self.gripper.max_gap_mm <= self.gripper.min_gap_mm
            || self.gripper.approach_clearance_mm < 0.0
        {
            return bad("gripper geometry or timing out of range".into());
        }
        let b = self.estimation.boundary.strain_threshold;
        if !(0.0 < b && b < 1.0) {
            return bad(format!("strain threshold {b} outside (0, 1)"));
        }
        if self.estimation.pair_disagreement_tol_mm <= 0.0
            || self.estimation.boundary_guard_mm < 0.0
        {
            return bad("estimation tolerances out of range".into());
        }
        if self.tuning.ambient_drift_v < 0.0
            || self.tuning.grasp_noise_rel < 0.0
            || !(0.0..0.5).contains(&self.tuning.sphere_skew)
            || !(0.0..1.0).contains(&self.tuning.shadow_contact)
        {
            return bad("disturbance tuning out of range".into());
        }
        if !(0.0 < self.calibration.r2_threshold && self.calibration.r2_threshold <= 1.0) {
            return bad(format!(
                "r2 threshold {} outside (0, 1]",
                self.calibration.r2_threshold
            ));
        }
        let plates = &self.calibration.plates;
        if plates.plate_widths_mm.is_empty()
            || plates.repetitions == 0
            || plates.hold_samples == 0
            || plates.sample_rate_hz <= 0.0
            || plates.commanded_gap_mm < 0.0
        {
            return bad("plate run config out of range".into());
        }
        if plates
            .plate_widths_mm
            .iter()
            .any(|w| *w <= plates.commanded_gap_mm)
        {
            return bad("every plate must be wider than the commanded gap".into());
        }
        Ok(())
    }

    /// Calibration options implied by this config; the valid interval is the
    /// sensor's linear band.
    pub fn calibrate_options(&self, created_at_ms: u64) -> CalibrateOptions {
        CalibrateOptions {
            r2_threshold: self.calibration.r2_threshold,
            valid_interval: ValidInterval::new(self.sensor.d_lo, self.sensor.d_hi),
            n_deforming_fingers: self.gripper.n_active_fingers,
            created_at_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let loaded = Config::load(&path).unwrap();
        assert_eq!(cfg, loaded);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("partial.json");
        std::fs::write(&path, r#"{"rig": {"rig_seed": 99}}"#).unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.rig.rig_seed, 99);
        assert_eq!(cfg.rig.n_channels, 8);
        assert_eq!(cfg.schema_version, CONFIG_SCHEMA_VERSION);
    }

    #[test]
    fn unknown_top_level_field_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("typo.json");
        std::fs::write(&path, r#"{"griper": {}}"#).unwrap();
        assert!(matches!(
            Config::load(&path),
            Err(ConfigError::Malformed(_))
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("future.json");
        std::fs::write(&path, r#"{"schema_version": 2}"#).unwrap();
        assert!(matches!(
            Config::load(&path),
            Err(ConfigError::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn inconsistent_finger_counts_are_rejected() {
        let mut cfg = Config::default();
        cfg.gripper.n_active_fingers = 3;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn plate_narrower_than_gap_is_rejected() {
        let mut cfg = Config::default();
        cfg.calibration.plates.plate_widths_mm.push(30.0);
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn calibrate_options_track_sensor_band() {
        let mut cfg = Config::default();
        cfg.sensor.d_lo = 4.0;
        cfg.sensor.d_hi = 28.0;
        let opts = cfg.calibrate_options(123);
        assert_eq!(opts.valid_interval.lo_mm, 4.0);
        assert_eq!(opts.valid_interval.hi_mm, 28.0);
        assert_eq!(opts.created_at_ms, 123);
        assert_eq!(opts.n_deforming_fingers, 2);
    }

    #[test]
    fn nan_in_config_is_rejected_at_parse() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.json");
        std::fs::write(&path, r#"{"sensor": {"v_rest": NaN}}"#).unwrap();
        assert!(matches!(
            Config::load(&path),
            Err(ConfigError::Malformed(_))
        ));
    }
}
