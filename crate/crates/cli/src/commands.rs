use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use vbci_core::clock::make_clock;
use vbci_core::dataset::{self, DatasetError, EpochParams, LoadedRun, RunType};
use vbci_core::metrics::{self, ChannelDifference, ChannelTestResult, StatsError};
use vbci_core::protocol::{ProtocolError, RunPlan, SessionPlan};
use vbci_core::session::{
    self, EventBus, SessionControl, SessionError, SessionOptions, SessionRecord, SyntheticSubject, EVENT_LOG,
    SESSION_RECORD,
};
use vbci_core::signal::{Band, PhaseMode};
use vbci_core::synth::{SubjectProfile, SynthError};
use vbci_core::training::{self, TrainingConfig, TrainingError};
use vbci_service::{ServiceConfig, ServiceError};

use crate::args::{
    EvaluateArgs, PermtestArgs, PreprocessArgs, Preset, ReplayArgs, ServeArgs, ShuffleUnit, SimulateArgs, TopoArgs,
    TrainArgs,
};

/// Failures on valid command lines: bad inputs, unreadable data, failed
/// validation.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn write_json_to<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    if let Some(path) = path {
        dataset::write_json(value, path)?;
    }
    Ok(())
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), CliError> {
    let fail = |e: csv::Error| CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for row in rows {
        w.serialize(row).map_err(fail)?;
    }
    w.flush().map_err(|e| fail(e.into()))
}

#[derive(Debug, Serialize)]
struct SimulatedRun {
    run_index: usize,
    run_type: RunType,
    manifest: String,
    completed_trials: usize,
    aborted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<metrics::RunMetrics>,
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    session_id: String,
    out_dir: PathBuf,
    event_log: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    offline_bundle: Option<PathBuf>,
    runs: Vec<SimulatedRun>,
}

/// The offline bundle written next to a simulated session.
pub const OFFLINE_BUNDLE: &str = "offline.json";

pub fn simulate(args: &SimulateArgs, seed: u64) -> Result<(), CliError> {
    let profile = match &args.profile {
        Some(path) => SubjectProfile::load(path)?.with_seed(seed),
        None => match args.preset {
            Preset::Strong => SubjectProfile::strong(seed),
            Preset::Null => SubjectProfile::null(seed),
        },
    };
    let mut plan = match &args.plan {
        Some(path) => SessionPlan::load(path)?,
        None => {
            let mut runs = Vec::new();
            for r in 0..args.offline_runs {
                runs.push(RunPlan::offline(
                    args.offline_trials,
                    0.5,
                    training::derive_seed(seed, 1, r as u64),
                )?);
            }
            for r in 0..args.online_runs {
                runs.push(RunPlan::standard(
                    args.online_trials,
                    0.5,
                    training::derive_seed(seed, 2, r as u64),
                )?);
            }
            SessionPlan::new(args.session_id.clone(), runs)
        }
    };
    if let Some(t) = args.yes_threshold {
        plan.decision.yes_threshold = t;
    }
    if let Some(t) = args.no_threshold {
        plan.decision.no_threshold = t;
    }
    plan.validate()?;
    let decoder = args
        .decoder
        .as_deref()
        .map(dataset::TrainedDecoderFile::load)
        .transpose()?;

    let mut subject = SyntheticSubject::new(profile)?;
    let mut clock = make_clock(args.clock.into());
    let control = SessionControl::new();
    let bus = EventBus::new();
    let mut options = SessionOptions::new(&args.out);
    options.seed = seed;
    options.chance_permutations = args.permutations;
    options.auto_rate = args.auto_rate;
    session::check_decoder(&plan, decoder.as_ref(), &subject)?;
    let event_log = session::open_session_log(&bus, &args.out, &plan.session_id, options.start_time)?;
    let result = session::run_session(
        &plan,
        decoder.as_ref(),
        &mut subject,
        clock.as_mut(),
        &control,
        &bus,
        &options,
    );
    bus.close_log();
    let record = result?;
    if let Some(message) = bus.log_failure() {
        return Err(CliError::Output {
            path: event_log,
            message,
        });
    }

    let bundle = record.offline_bundle("");
    let offline_bundle = if bundle.runs.is_empty() {
        None
    } else {
        let path = args.out.join(OFFLINE_BUNDLE);
        dataset::write_json(&bundle, &path)?;
        Some(path)
    };
    print_json(&SimulateSummary {
        session_id: record.session_id.clone(),
        out_dir: args.out.clone(),
        event_log,
        offline_bundle,
        runs: record
            .runs
            .iter()
            .map(|r| SimulatedRun {
                run_index: r.run_index,
                run_type: r.run_type,
                manifest: r.manifest.clone(),
                completed_trials: r.trials.len(),
                aborted: r.aborted,
                metrics: r.metrics.clone(),
            })
            .collect(),
    });
    Ok(())
}

/// Loads runs from bundle files or session directories. Aborted runs are
/// skipped. Directories contribute only their offline runs if
/// `offline_only`; bundles are taken as listed.
fn load_inputs(inputs: &[PathBuf], offline_only: bool) -> Result<Vec<LoadedRun>, CliError> {
    let mut runs = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let record: SessionRecord = dataset::read_json(&input.join(SESSION_RECORD))?;
            for r in &record.runs {
                if r.aborted || (offline_only && r.run_type != RunType::Offline) {
                    continue;
                }
                runs.push(dataset::load_run(&input.join(&r.manifest))?);
            }
        } else {
            runs.extend(dataset::load_bundle(input)?.into_iter().filter(|r| !r.manifest.aborted));
        }
    }
    let Some(first) = runs.first() else {
        return Err(CliError::Invalid("no usable runs in the inputs".into()));
    };
    let (names, rate) = (&first.recording.channel_names, first.recording.sample_rate_hz);
    if let Some(bad) = runs
        .iter()
        .find(|r| &r.recording.channel_names != names || r.recording.sample_rate_hz != rate)
    {
        return Err(CliError::Invalid(format!(
            "run {} has a different montage or sample rate",
            bad.manifest.run_id
        )));
    }
    Ok(runs)
}

pub fn train(args: &TrainArgs, seed: u64) -> Result<(), CliError> {
    let runs = load_inputs(&args.inputs, true)?;
    let rate = runs[0].recording.sample_rate_hz;
    let mut config = TrainingConfig::standard(rate, seed);
    config.regularization_c = args.c;
    config.ensemble.n_trees = args.trees;
    config.ensemble.n_iterations = args.iterations;
    config.calibration_scores = args.calibration.into();
    args.preprocess.apply(&mut config.preprocessing);
    let trained = training::train_decoder(&runs, &config)?;
    trained.decoder.save(&args.out)?;
    write_json_to(&trained.report, args.report.as_deref())?;
    print_json(&trained.report);
    Ok(())
}

pub fn replay(args: &ReplayArgs) -> Result<(), CliError> {
    let decoder = dataset::TrainedDecoderFile::load(&args.decoder)?;
    let report = session::replay_session(&args.session, &decoder)?;
    write_json_to(&report, args.out.as_deref())?;
    print_json(&report);
    if args.check && !report.identical {
        let differing = report.comparisons.iter().filter(|c| !c.identical).count();
        return Err(CliError::Invalid(format!(
            "{differing} of {} replayed decisions differ from the log",
            report.comparisons.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    session_id: &'a str,
    run_index: usize,
    run_type: RunType,
    n_decoded: usize,
    n_scored: usize,
    kappa: Option<f64>,
    chance_kappa: Option<f64>,
    bar_dynamics: Option<f64>,
    hits_at_threshold: Option<f64>,
    threshold: Option<f64>,
    mean_latency_s: Option<f64>,
}

pub fn evaluate(args: &EvaluateArgs, seed: u64) -> Result<(), CliError> {
    let path = if args.log.is_dir() {
        args.log.join(EVENT_LOG)
    } else {
        args.log.clone()
    };
    let (header, events) = session::read_event_log(&path)?;
    let report = session::evaluate_log(&header, &events, args.permutations, seed)?;
    write_json_to(&report, args.out.as_deref())?;
    if let Some(csv_path) = &args.csv {
        let rows: Vec<MetricsRow> = report
            .runs
            .iter()
            .map(|r| {
                let m = r.metrics.as_ref();
                MetricsRow {
                    session_id: &report.session_id,
                    run_index: r.run_index,
                    run_type: r.run_type,
                    n_decoded: r.n_decoded,
                    n_scored: r.n_scored,
                    kappa: m.map(|m| m.kappa.kappa),
                    chance_kappa: m.map(|m| m.chance_kappa),
                    bar_dynamics: m.map(|m| m.bar_dynamics),
                    hits_at_threshold: m.map(|m| m.hits_at_threshold),
                    threshold: m.map(|m| m.threshold),
                    mean_latency_s: m.and_then(|m| m.mean_latency_s),
                }
            })
            .collect();
        write_csv(&rows, csv_path)?;
    }
    print_json(&report);
    Ok(())
}

/// Zero-phase features of every labeled frame in `runs`.
fn analysis_features(
    runs: &[LoadedRun],
    preprocess: &PreprocessArgs,
) -> Result<(dataset::FeatureSet, Vec<String>), CliError> {
    let rate = runs[0].recording.sample_rate_hz;
    let mut params = EpochParams::standard(rate).with_phase_mode(PhaseMode::ZeroPhase);
    preprocess.apply(&mut params);
    let data = dataset::epoch_runs(runs, &params)?;
    Ok((data, runs[0].recording.channel_names.clone()))
}

#[derive(Debug, Serialize)]
struct BandTest {
    band: Band,
    significant: Vec<String>,
    #[serde(flatten)]
    result: ChannelTestResult,
}

#[derive(Debug, Serialize)]
struct PermtestReport {
    n_runs: usize,
    n_modulated_frames: usize,
    n_baseline_frames: usize,
    alpha_level: f64,
    bands: Vec<BandTest>,
}

#[derive(Debug, Serialize)]
struct PermtestRow<'a> {
    band: Band,
    channel: &'a str,
    difference: f64,
    p_raw: f64,
    p_adjusted: f64,
    p_display: String,
    significant: bool,
}

pub fn permtest(args: &PermtestArgs, seed: u64) -> Result<(), CliError> {
    if !(args.alpha_level > 0.0 && args.alpha_level < 1.0) {
        return Err(CliError::Invalid(format!(
            "alpha level {} outside (0, 1)",
            args.alpha_level
        )));
    }
    let runs = load_inputs(&args.inputs, false)?;
    let (data, names) = analysis_features(&runs, &args.preprocess)?;
    let n_mod = data
        .labels
        .iter()
        .filter(|&&c| c == vbci_core::Class::Modulated)
        .count();
    let mut bands = Vec::new();
    for band in args.band.bands() {
        let band_seed = training::derive_seed(seed, band.index() as u64, 0);
        let result = match args.shuffle_unit {
            ShuffleUnit::Trial => {
                let blocks = metrics::TrialBlocks::new(&data, band, &names)?;
                metrics::channel_test_by_trial(&blocks, args.shuffles, band_seed)?
            }
            ShuffleUnit::Frame => {
                let (a, b) = metrics::class_groups(&data, band, names.len());
                metrics::channel_test(&names, &a, &b, args.shuffles, band_seed)?
            }
        };
        bands.push(BandTest {
            band,
            significant: result
                .significant(args.alpha_level)
                .into_iter()
                .map(String::from)
                .collect(),
            result,
        });
    }
    let report = PermtestReport {
        n_runs: runs.len(),
        n_modulated_frames: n_mod,
        n_baseline_frames: data.len() - n_mod,
        alpha_level: args.alpha_level,
        bands,
    };
    write_json_to(&report, args.out.as_deref())?;
    if let Some(csv_path) = &args.csv {
        let rows: Vec<PermtestRow> = report
            .bands
            .iter()
            .flat_map(|t| {
                let r = &t.result;
                (0..r.channel_names.len()).map(move |c| PermtestRow {
                    band: t.band,
                    channel: &r.channel_names[c],
                    difference: r.observed_diff[c],
                    p_raw: r.p_raw[c],
                    p_adjusted: r.p_adjusted[c],
                    p_display: metrics::format_p_value(r.p_adjusted[c], r.n_shuffles),
                    significant: r.p_adjusted[c] <= args.alpha_level,
                })
            })
            .collect();
        write_csv(&rows, csv_path)?;
    }
    print_json(&report);
    Ok(())
}

#[derive(Debug, Serialize)]
struct TopoReport {
    n_runs: usize,
    differences: Vec<ChannelDifference>,
}

pub fn topo(args: &TopoArgs) -> Result<(), CliError> {
    let runs = load_inputs(&args.inputs, false)?;
    let (data, names) = analysis_features(&runs, &args.preprocess)?;
    let mut differences = Vec::new();
    for band in args.band.bands() {
        differences.extend(metrics::topo_class_difference(&data, band, &names)?);
    }
    let report = TopoReport {
        n_runs: runs.len(),
        differences,
    };
    write_json_to(&report, args.out.as_deref())?;
    if let Some(csv_path) = &args.csv {
        write_csv(&report.differences, csv_path)?;
    }
    print_json(&report);
    Ok(())
}

pub fn serve(args: &ServeArgs, seed: u64) -> Result<(), CliError> {
    let mut config = ServiceConfig::new(&args.data_dir, args.subject.clone());
    config.host = args.host;
    config.port = args.port;
    config.decoder = args.decoder.clone();
    config.clock = args.clock.into();
    config.seed = seed;
    config.auto_rate = args.auto_rate;
    config.chance_permutations = args.permutations;
    config.client_buffer = args.client_buffer;
    let runtime =
        tokio::runtime::Runtime::new().map_err(|e| CliError::Invalid(format!("cannot start runtime: {e}")))?;
    runtime.block_on(vbci_service::serve(config))?;
    Ok(())
}
