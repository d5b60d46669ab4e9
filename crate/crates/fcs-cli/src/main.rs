//! Command-line front end for the tactile sensing pipeline.
//!
//! Subcommands mirror the bench workflows: `calibrate` fits the rig from
//! simulated plate grasps, `sort` runs the seeded sorting experiment,
//! `replay` re-runs estimation over a recorded telemetry byte log, and
//! `characterize` sweeps displacement to emit plot-ready linearity data.
//!
//! Exit codes: 0 success, 2 usage, 3 calibration failed, 4 I/O or unusable
//! input file, 5 domain error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fcs_core::*;

const EXIT_CALIBRATION: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_DOMAIN: u8 = 5;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn calibration(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CALIBRATION,
            message: message.into(),
        }
    }
    fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: message.into(),
        }
    }
    fn domain(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DOMAIN,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(_) => CliError::domain(e.to_string()),
            _ => CliError::io(e.to_string()),
        }
    }
}

impl From<PersistenceError> for CliError {
    fn from(e: PersistenceError) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::domain(e.to_string())
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        CliError::domain(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "fcs",
    version,
    about = "Fiber-cavity tactile sensing: calibration, sorting, replay, characterization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormatArg {
    Json,
    Csv,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate plate calibration against the configured rig and write a
    /// channel profile
    Calibrate {
        /// JSON config file; defaults apply if omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for measurement noise during the plate run
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output profile path
        #[arg(long, default_value = "profile.json")]
        out: PathBuf,
    },
    /// Generate the seeded object set, grasp and classify every object, and
    /// write the sorting report
    Sort {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for object generation and per-grasp disturbances
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Calibration profile from `calibrate`
        #[arg(long, default_value = "profile.json")]
        profile: PathBuf,
        /// Output base path; writes <out>.json and/or <out>.csv
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Which report files to write
        #[arg(long, value_enum, default_value_t = ReportFormatArg::Both)]
        format: ReportFormatArg,
        /// Truncate the generated object set to this many objects
        #[arg(long)]
        objects: Option<usize>,
        /// Append one JSON line per grasp episode to this file
        #[arg(long)]
        episode_log: Option<PathBuf>,
    },
    /// Decode a recorded telemetry byte log, filter it, and re-run
    /// estimation on the steady window
    Replay {
        /// Raw byte log of encoded frames (file or character device)
        log: PathBuf,
        #[arg(long, default_value = "profile.json")]
        profile: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Gripper gap at first contact, mm; with --gap-steady enables the
        /// full diameter/strain/force estimate
        #[arg(long)]
        gap_contact: Option<f64>,
        /// Gripper gap at steady state, mm
        #[arg(long)]
        gap_steady: Option<f64>,
        /// Moving-average window (odd sample count) for the trace summary
        #[arg(long, default_value_t = 5)]
        filter_window: usize,
    },
    /// Sweep fingertip displacement and write raw, filtered, and fitted
    /// voltage per channel as CSV
    Characterize {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for per-sample measurement noise
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "characterization.csv")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate { config, seed, out } => cmd_calibrate(&config, seed, &out),
        Command::Sort {
            config,
            seed,
            profile,
            out,
            format,
            objects,
            episode_log,
        } => cmd_sort(&config, seed, &profile, &out, format, objects, &episode_log),
        Command::Replay {
            log,
            profile,
            config,
            gap_contact,
            gap_steady,
            filter_window,
        } => cmd_replay(&log, &profile, &config, gap_contact, gap_steady, filter_window),
        Command::Characterize { config, seed, out } => cmd_characterize(&config, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, CliError> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn rig_from(cfg: &Config) -> Vec<SensorChannelModel> {
    build_rig(
        &cfg.sensor,
        cfg.rig.n_channels,
        cfg.rig.gain_spread,
        cfg.rig.offset_spread,
        cfg.rig.rig_seed,
    )
}

/// Timestamp recorded in profiles: honor SOURCE_DATE_EPOCH (seconds) for
/// reproducible artifacts, otherwise zero. Wall clock is never consulted, so
/// a command's outputs depend only on (config, seed).
fn created_at_ms() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .map(|secs| secs * 1000)
        .unwrap_or(0)
}

fn cmd_calibrate(config: &Option<PathBuf>, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let rig = rig_from(&cfg);
    let samples = simulate_plate_calibration(
        &rig,
        &cfg.calibration.plates,
        cfg.gripper.n_active_fingers,
        seed,
    )?;
    let profile = calibrate(&samples, &cfg.calibrate_options(created_at_ms()))
        .map_err(|e| CliError::calibration(e.to_string()))?;
    for fit in &profile.channels {
        println!(
            "channel {}: slope {:.6} V/mm, intercept {:.6} V, r2 {:.6}",
            fit.channel_id, fit.slope, fit.intercept, fit.r_squared
        );
    }
    let rejected = rig.len() - profile.channels.len();
    if rejected > 0 {
        println!("rejected {rejected} channel(s) below r2 {}", profile.r2_threshold);
    }
    save_profile(&profile, out)?;
    println!("profile written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sort(
    config: &Option<PathBuf>,
    seed: u64,
    profile_path: &Path,
    out: &Path,
    format: ReportFormatArg,
    objects: Option<usize>,
    episode_log: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let profile = load_profile(profile_path)?;
    let rig = rig_from(&cfg);
    let mut set = generate_object_set(
        &cfg.mix,
        &cfg.gripper,
        &cfg.estimation.force_curve,
        &cfg.tuning,
        seed,
    );
    if let Some(n) = objects {
        if n == 0 {
            return Err(CliError::domain("object count must be positive"));
        }
        if n > set.len() {
            return Err(CliError::domain(format!(
                "object count {n} exceeds the generated set of {}",
                set.len()
            )));
        }
        set.truncate(n);
    }
    let (report, episodes) = run_sorting_experiment(
        &profile,
        &set,
        &rig,
        &cfg.gripper,
        &cfg.estimation,
        &cfg.tuning,
        seed,
    )?;
    if let Some(log_path) = episode_log {
        for (episode, estimate) in &episodes {
            append_episode_log(&EpisodeRecord::new(episode, estimate), log_path)?;
        }
    }
    let a = &report.aggregates;
    println!(
        "rigid prismatic within 6 mm: {:.1}% ({}/{})",
        100.0 * a.rigid_prismatic_within_6mm,
        (a.rigid_prismatic_within_6mm * a.n_rigid_prismatic as f64).round() as usize,
        a.n_rigid_prismatic
    );
    println!("mean abs diameter error: {:.3} mm", a.mean_abs_diameter_error_mm);
    println!(
        "measurable strain within 0.1: {:.1}% ({}/{})",
        100.0 * a.measurable_strain_within_0p1,
        (a.measurable_strain_within_0p1 * a.n_measurable_strain as f64).round() as usize,
        a.n_measurable_strain
    );
    println!("mean abs strain error: {:.4}", a.mean_abs_strain_error);
    println!(
        "classification success: {:.1}% over {} graspable",
        100.0 * a.classification_success,
        a.n_graspable
    );
    println!(
        "unrecognizable: {}, slipped: {}",
        a.n_unrecognizable, a.n_slipped
    );
    let json_path = out.with_extension("json");
    let csv_path = out.with_extension("csv");
    if format != ReportFormatArg::Csv {
        write_report(&report, &json_path, ReportFormat::Structured)?;
        println!("report written to {}", json_path.display());
    }
    if format != ReportFormatArg::Json {
        write_report(&report, &csv_path, ReportFormat::Tabular)?;
        println!("report written to {}", csv_path.display());
    }
    Ok(())
}

fn cmd_replay(
    log: &Path,
    profile_path: &Path,
    config: &Option<PathBuf>,
    gap_contact: Option<f64>,
    gap_steady: Option<f64>,
    filter_window: usize,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let profile = load_profile(profile_path)?;
    let bytes = std::fs::read(log)?;
    let mut decoder = FrameDecoder::new();
    let mut frames = Vec::new();
    for chunk in bytes.chunks(4096) {
        frames.extend(decoder.push_bytes(chunk));
    }
    let stats = decoder.stats();
    println!(
        "frames: {} decoded, {} corrupt candidates, {} missed by sequence, {} bytes skipped",
        stats.frames_decoded, stats.corrupt_frames, stats.missed_frames, stats.skipped_bytes
    );
    if frames.is_empty() {
        println!("no frames decoded; nothing to estimate");
        return Ok(());
    }

    // Trace summary over the filtered per-channel series: peak slew tells
    // whether the log actually contains a grasp transient.
    let timestamps: Vec<f64> = frames.iter().map(|f| f.timestamp_ms as f64).collect();
    let mut peak_slew: f64 = 0.0;
    if timestamps.windows(2).all(|w| w[1] > w[0]) && frames.len() > 1 {
        for ch in 0..FRAME_CHANNELS {
            let volts: Vec<f64> = frames.iter().map(|f| counts_to_volts(f.counts[ch])).collect();
            let filtered = filter_and_differentiate(&timestamps, &volts, filter_window)
                .map_err(|e| CliError::domain(e.to_string()))?;
            for s in &filtered {
                peak_slew = peak_slew.max(s.derivative_per_s.abs());
            }
        }
        println!("peak filtered slew: {peak_slew:.3} V/s");
    }

    let hold = cfg.gripper.steady_hold_samples.min(frames.len());
    let tail = &frames[frames.len() - hold..];
    let steady: Vec<f64> = (0..FRAME_CHANNELS)
        .map(|ch| tail.iter().map(|f| counts_to_volts(f.counts[ch])).sum::<f64>() / hold as f64)
        .collect();
    println!("steady window: last {hold} frames");

    match (gap_contact, gap_steady) {
        (Some(contact), Some(steady_gap)) => {
            let est = estimate_grasp(&profile, &steady, contact, steady_gap, &cfg.estimation)?;
            print_estimate(&est);
        }
        _ => {
            let agg = aggregate_pairs(&profile, &steady, &cfg.estimation)?;
            for (i, d) in agg.pair_displacements.iter().enumerate() {
                println!("pair {i}: {d:.3} mm");
            }
            println!("midpoint displacement: {:.3} mm", agg.midpoint_displacement);
            print_anomalies(&agg.anomalies);
            println!("pass --gap-contact and --gap-steady for diameter/strain/force");
        }
    }
    Ok(())
}

fn print_estimate(est: &GraspEstimate) {
    for (i, d) in est.pair_displacements.iter().enumerate() {
        println!("pair {i}: {d:.3} mm");
    }
    println!("midpoint displacement: {:.3} mm", est.midpoint_displacement);
    println!("estimated diameter: {:.3} mm", est.estimated_diameter);
    println!("estimated strain: {}", est.estimated_strain);
    println!("estimated force: {:.3} N", est.estimated_force);
    println!("classification: {}", est.classification);
    print_anomalies(&est.anomalies);
}

fn print_anomalies(anomalies: &std::collections::BTreeSet<Anomaly>) {
    if anomalies.is_empty() {
        println!("anomalies: none");
    } else {
        let list: Vec<String> = anomalies.iter().map(|a| a.to_string()).collect();
        println!("anomalies: {}", list.join(", "));
    }
}

fn cmd_characterize(config: &Option<PathBuf>, seed: u64, out: &Path) -> Result<(), CliError> {
    use rand_chacha::rand_core::SeedableRng;
    let cfg = load_config(config)?;
    let rig = rig_from(&cfg);
    let sweep: Vec<f64> = (0..=70).map(|i| i as f64 * 0.5).collect();

    // One noisy reading per channel per displacement, like stepping the test
    // stand through the sweep once.
    let mut raw = vec![Vec::with_capacity(sweep.len()); rig.len()];
    for (ch, model) in rig.iter().enumerate() {
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 400 + ch as u64));
        for &d in &sweep {
            let v = model
                .voltage_at_noisy(d, &mut rng)
                .map_err(|e| CliError::domain(e.to_string()))?;
            raw[ch].push(v);
        }
    }
    let timestamps: Vec<f64> = (0..sweep.len()).map(|i| i as f64 * 10.0).collect();
    let mut filtered = Vec::with_capacity(rig.len());
    for series in &raw {
        let f = filter_and_differentiate(&timestamps, series, 5)
            .map_err(|e| CliError::domain(e.to_string()))?;
        filtered.push(f.into_iter().map(|s| s.filtered).collect::<Vec<f64>>());
    }
    let mut fits = Vec::with_capacity(rig.len());
    for (ch, model) in rig.iter().enumerate() {
        let points: Vec<(f64, f64)> = sweep
            .iter()
            .zip(&raw[ch])
            .filter(|(d, _)| **d >= model.d_lo && **d <= model.d_hi)
            .map(|(d, v)| (*d, *v))
            .collect();
        let fit = fit_linear(&points).map_err(|e| CliError::domain(e.to_string()))?;
        println!(
            "channel {ch}: slope {:.6} V/mm, intercept {:.6} V, r2 {:.6}",
            fit.slope, fit.intercept, fit.r_squared
        );
        fits.push(fit);
    }

    let mut csv = String::from("displacement_mm");
    for ch in 0..rig.len() {
        csv.push_str(&format!(",ch{ch}_raw_v,ch{ch}_filtered_v,ch{ch}_fit_v"));
    }
    csv.push('\n');
    for (i, d) in sweep.iter().enumerate() {
        csv.push_str(&format!("{d:.1}"));
        for ch in 0..rig.len() {
            let fit_v = fits[ch].slope * d + fits[ch].intercept;
            csv.push_str(&format!(
                ",{:.6},{:.6},{:.6}",
                raw[ch][i], filtered[ch][i], fit_v
            ));
        }
        csv.push('\n');
    }
    std::fs::write(out, csv)?;
    println!("sweep written to {}", out.display());
    Ok(())
}
