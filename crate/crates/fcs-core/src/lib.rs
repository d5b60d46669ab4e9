//! Tactile sensing pipeline for a fiber-cavity soft gripper finger.
//!
//! The signal chain: a bent fingertip attenuates light in an embedded fiber
//! cavity, read out as a 0-5 V photoresistor voltage ([`sensor`]); grasping
//! plates of known width fits each channel's voltage-displacement line
//! ([`calibration`]); steady grasp voltages then become pair displacements,
//! sectional diameter, strain, force, and a soft/rigid call ([`estimation`]).
//! A seeded grasp simulator closes the loop for end-to-end validation
//! ([`sim`]), [`telemetry`] defines the wire framing for real hardware, and
//! [`config`]/[`persistence`] handle the files a run touches.

pub mod calibration;
pub mod config;
pub mod estimation;
pub mod persistence;
pub mod sensor;
pub mod sim;
pub mod telemetry;

pub use calibration::{
    calibrate, fit_linear, normalize_channels, profile_drift, CalibrateOptions,
    CalibrationError, CalibrationProfile, CalibrationSample, ChannelDrift, ChannelFit,
    DisplacementReading, LinearFit, RangeStatus, ValidInterval,
};
pub use config::{Config, ConfigError, RigConfig, CONFIG_SCHEMA_VERSION};
pub use estimation::{
    aggregate_pairs, classify, detect_contact_shadowing, estimate_diameter, estimate_force,
    estimate_grasp, estimate_strain, Anomaly, Classification, EstimationConfig, EstimationError,
    ForceCurve, GraspEstimate, PairAggregate, PairMap, SortingBoundary, Strain,
};
pub use persistence::{
    append_episode_log, load_object_set, load_profile, load_report, read_episode_log,
    report_to_csv_string, save_object_set, save_profile, write_report, EpisodeRecord,
    PersistenceError, ProfileDocument, ReportFormat,
};
pub use sensor::{SensorChannelModel, SensorError, SensorReading, RAIL_V};
pub use sim::{
    build_rig, generate_object_set, mix_seed, run_grasp, run_sorting_experiment,
    simulate_plate_calibration, Aggregates, GraspEpisode, GraspOutcome, GripperConfig,
    ObjectMix, ObjectRow, ObjectSpec, PlateRunConfig, ShapeClass, SimError, SimTuning,
    SortingReport,
};
pub use telemetry::{
    counts_to_volts, decode_frame, encode_frame, filter_and_differentiate, frames_from_traces,
    volts_to_counts, FilteredSample, FrameDecoder, StreamStats, TelemetryError, TelemetryFrame,
    COUNT_MAX, FRAME_CHANNELS, FRAME_LEN, MAGIC,
};
