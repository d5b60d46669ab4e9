//! On-disk formats: JSON for calibration profiles, object sets, and
//! structured reports; CSV for plot-ready per-object rows; newline-delimited
//! JSON for episode logs.
//!
//! Every document carries a schema_version and every load validates
//! finiteness, so a stale or hand-mangled file fails loudly instead of
//! feeding NaN into the pipeline.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationProfile, ChannelFit, ValidInterval};
use crate::estimation::GraspEstimate;
use crate::sim::{GraspEpisode, GraspOutcome, ObjectSpec, SortingReport};

pub const PROFILE_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const EPISODE_SCHEMA_VERSION: u32 = 1;
pub const OBJECT_SET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PersistenceError {
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("schema version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

fn probe_version(text: &str) -> Result<u32, PersistenceError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| PersistenceError::Malformed(e.to_string()))?;
    value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .map(|v| v as u32)
        .ok_or_else(|| PersistenceError::Malformed("missing schema_version".into()))
}

fn check_version(found: u32, expected: u32) -> Result<(), PersistenceError> {
    if found == expected {
        Ok(())
    } else {
        Err(PersistenceError::VersionMismatch { found, expected })
    }
}

// ---------------------------------------------------------------------------
// calibration profiles
// ---------------------------------------------------------------------------

/// Flat on-disk form of a calibration profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDocument {
    pub schema_version: u32,
    pub channels: Vec<ChannelFit>,
    pub valid_lo_mm: f64,
    pub valid_hi_mm: f64,
    pub n_deforming_fingers: u8,
    pub created_at_ms: u64,
    pub r2_threshold: f64,
}

impl From<&CalibrationProfile> for ProfileDocument {
    fn from(p: &CalibrationProfile) -> Self {
        ProfileDocument {
            schema_version: PROFILE_SCHEMA_VERSION,
            channels: p.channels.clone(),
            valid_lo_mm: p.valid_interval.lo_mm,
            valid_hi_mm: p.valid_interval.hi_mm,
            n_deforming_fingers: p.n_deforming_fingers,
            created_at_ms: p.created_at_ms,
            r2_threshold: p.r2_threshold,
        }
    }
}

impl ProfileDocument {
    pub fn into_profile(self) -> Result<CalibrationProfile, PersistenceError> {
        check_version(self.schema_version, PROFILE_SCHEMA_VERSION)?;
        for fit in &self.channels {
            if !fit.slope.is_finite() || !fit.intercept.is_finite() || !fit.r_squared.is_finite()
            {
                return Err(PersistenceError::NonFinite(format!(
                    "channel {}",
                    fit.channel_id
                )));
            }
        }
        if !self.valid_lo_mm.is_finite()
            || !self.valid_hi_mm.is_finite()
            || self.valid_lo_mm >= self.valid_hi_mm
        {
            return Err(PersistenceError::Malformed("bad valid interval".into()));
        }
        if !self.r2_threshold.is_finite() {
            return Err(PersistenceError::NonFinite("r2_threshold".into()));
        }
        Ok(CalibrationProfile {
            channels: self.channels,
            valid_interval: ValidInterval::new(self.valid_lo_mm, self.valid_hi_mm),
            n_deforming_fingers: self.n_deforming_fingers,
            created_at_ms: self.created_at_ms,
            r2_threshold: self.r2_threshold,
        })
    }
}

pub fn save_profile(profile: &CalibrationProfile, path: &Path) -> Result<(), PersistenceError> {
    let doc = ProfileDocument::from(profile);
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| PersistenceError::Malformed(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_profile(path: &Path) -> Result<CalibrationProfile, PersistenceError> {
    let text = std::fs::read_to_string(path)?;
    check_version(probe_version(&text)?, PROFILE_SCHEMA_VERSION)?;
    let doc: ProfileDocument =
        serde_json::from_str(&text).map_err(|e| PersistenceError::Malformed(e.to_string()))?;
    doc.into_profile()
}

// ---------------------------------------------------------------------------
// sorting reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    #[serde(flatten)]
    pub report: SortingReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Full JSON document with rows and aggregates.
    Structured,
    /// CSV, one row per object, for plotting.
    Tabular,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_to_csv_string(report: &SortingReport) -> String {
    let mut out = String::from(
        "object_id,name,shape,graspable,outcome,true_diameter_mm,estimated_diameter_mm,\
         diameter_error_mm,true_strain,estimated_strain,strain_error,estimated_force_n,\
         true_class,classification,anomalies\n",
    );
    for r in &report.rows {
        let (est_strain, strain_err) = match r.estimated_strain.value() {
            Some(s) => (format!("{s:.6}"), format!("{:.6}", (s - r.true_strain).abs())),
            None => (String::new(), String::new()),
        };
        let anomalies = r
            .anomalies
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{},{},{}\n",
            r.object_id,
            csv_field(&r.name),
            r.shape_class,
            r.graspable,
            r.outcome,
            r.true_diameter_mm,
            r.estimated_diameter_mm,
            (r.estimated_diameter_mm - r.true_diameter_mm).abs(),
            r.true_strain,
            est_strain,
            strain_err,
            r.estimated_force_n,
            r.true_class,
            r.classification,
            anomalies,
        ));
    }
    out
}

pub fn write_report(
    report: &SortingReport,
    path: &Path,
    format: ReportFormat,
) -> Result<(), PersistenceError> {
    match format {
        ReportFormat::Structured => {
            let doc = ReportDocument {
                schema_version: REPORT_SCHEMA_VERSION,
                report: report.clone(),
            };
            let text = serde_json::to_string_pretty(&doc)
                .map_err(|e| PersistenceError::Malformed(e.to_string()))?;
            std::fs::write(path, text + "\n")?;
        }
        ReportFormat::Tabular => {
            std::fs::write(path, report_to_csv_string(report))?;
        }
    }
    Ok(())
}

pub fn load_report(path: &Path) -> Result<SortingReport, PersistenceError> {
    let text = std::fs::read_to_string(path)?;
    check_version(probe_version(&text)?, REPORT_SCHEMA_VERSION)?;
    let doc: ReportDocument =
        serde_json::from_str(&text).map_err(|e| PersistenceError::Malformed(e.to_string()))?;
    for r in &doc.report.rows {
        let strain_finite = r.estimated_strain.value().map_or(true, f64::is_finite);
        if !r.true_diameter_mm.is_finite()
            || !r.estimated_diameter_mm.is_finite()
            || !r.true_strain.is_finite()
            || !r.estimated_force_n.is_finite()
            || !strain_finite
        {
            return Err(PersistenceError::NonFinite(format!("row {}", r.object_id)));
        }
    }
    Ok(doc.report)
}

// ---------------------------------------------------------------------------
// episode logs
// ---------------------------------------------------------------------------

/// Compact per-grasp log record: everything needed to rerun estimation,
/// without the full traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    pub object_id: u32,
    pub name: String,
    pub outcome: GraspOutcome,
    pub seed: u64,
    pub true_diameter_mm: f64,
    pub gap_at_contact_mm: f64,
    pub gap_at_steady_mm: f64,
    pub true_midpoint_mm: f64,
    pub true_compression_mm: f64,
    pub true_strain: f64,
    pub per_finger_force_n: f64,
    pub steady_voltages: Vec<f64>,
    pub estimate: GraspEstimate,
}

impl EpisodeRecord {
    pub fn new(episode: &GraspEpisode, estimate: &GraspEstimate) -> Self {
        EpisodeRecord {
            schema_version: EPISODE_SCHEMA_VERSION,
            object_id: episode.object.id,
            name: episode.object.name.clone(),
            outcome: episode.outcome,
            seed: episode.seed,
            true_diameter_mm: episode.object.true_diameter_mm,
            gap_at_contact_mm: episode.gap_at_contact_mm,
            gap_at_steady_mm: episode.gap_at_steady_mm,
            true_midpoint_mm: episode.true_midpoint_mm,
            true_compression_mm: episode.true_compression_mm,
            true_strain: episode.true_strain,
            per_finger_force_n: episode.per_finger_force_n,
            steady_voltages: episode.steady_voltages.clone(),
            estimate: estimate.clone(),
        }
    }
}

/// Append one record as a single JSON line.
pub fn append_episode_log(record: &EpisodeRecord, path: &Path) -> Result<(), PersistenceError> {
    let line =
        serde_json::to_string(record).map_err(|e| PersistenceError::Malformed(e.to_string()))?;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Read a log, tolerating a truncated final line (the tail of an interrupted
/// write). A corrupt line anywhere else is an error.
pub fn read_episode_log(path: &Path) -> Result<Vec<EpisodeRecord>, PersistenceError> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EpisodeRecord>(line) {
            Ok(record) => {
                check_version(record.schema_version, EPISODE_SCHEMA_VERSION)?;
                if record.steady_voltages.iter().any(|v| !v.is_finite()) {
                    return Err(PersistenceError::NonFinite(format!(
                        "episode record {}",
                        record.object_id
                    )));
                }
                records.push(record);
            }
            Err(e) => {
                if i == lines.len() - 1 {
                    break;
                }
                return Err(PersistenceError::Malformed(format!("line {}: {e}", i + 1)));
            }
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// object sets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSetDocument {
    pub schema_version: u32,
    pub objects: Vec<ObjectSpec>,
}

pub fn save_object_set(objects: &[ObjectSpec], path: &Path) -> Result<(), PersistenceError> {
    let doc = ObjectSetDocument {
        schema_version: OBJECT_SET_SCHEMA_VERSION,
        objects: objects.to_vec(),
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| PersistenceError::Malformed(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_object_set(path: &Path) -> Result<Vec<ObjectSpec>, PersistenceError> {
    let text = std::fs::read_to_string(path)?;
    check_version(probe_version(&text)?, OBJECT_SET_SCHEMA_VERSION)?;
    let doc: ObjectSetDocument =
        serde_json::from_str(&text).map_err(|e| PersistenceError::Malformed(e.to_string()))?;
    for o in &doc.objects {
        if !o.true_diameter_mm.is_finite() || !o.stiffness_n_per_mm.is_finite() {
            return Err(PersistenceError::NonFinite(format!("object {}", o.id)));
        }
    }
    Ok(doc.objects)
}
