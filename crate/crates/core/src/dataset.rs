//! Recordings, run manifests, decoder files and trial epoching.
//!
//! Recording files are a single JSON header line followed by the raw sample
//! payload as little-endian `f32`, interleaved by time (all channels of
//! sample 0, then all channels of sample 1, ...):
//!
//! ```text
//! {"magic":"VBCI","schema_version":1,"sample_rate_hz":512.0,...,"n_samples":N}\n
//! <N * channels * 4 bytes>
//! ```
//!
//! Manifests, bundles and decoder files are plain JSON documents carrying a
//! `schema_version`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::online::DecisionConfig;
use crate::signal::{
    self, Band, BandFilterBank, BandPowerBaseline, BandPowerFrame, FilterSpec, PhaseMode, SignalError,
};
use crate::{Class, TrueClass, SCHEMA_VERSION};

pub const RECORDING_MAGIC: &str = "VBCI";
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 512.0;

/// 32-electrode montage; its order defines channel indices everywhere.
pub const MONTAGE: [&str; 32] = [
    "FP1", "FPz", "FP2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "M1", "T7", "C3", "Cz", "C4", "T8",
    "M2", "CP5", "CP1", "CP2", "CP6", "P7", "P3", "Pz", "P4", "P8", "POz", "O1", "Oz", "O2",
];

pub fn montage() -> Vec<String> {
    MONTAGE.iter().map(|s| s.to_string()).collect()
}

pub fn montage_index(name: &str) -> Option<usize> {
    MONTAGE.iter().position(|m| m.eq_ignore_ascii_case(name))
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("{names} channel names but {rows} sample rows")]
    ChannelCountMismatch { names: usize, rows: usize },
    #[error("schema version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid decoder: {0}")]
    InvalidDecoder(String),
    #[error("trial {trial} needs samples [{start}, {end}) but the recording has {available}")]
    EventOutOfBounds {
        trial: usize,
        start: i64,
        end: usize,
        available: usize,
    },
    #[error("trial {trial}: {source}")]
    DegenerateBaseline { trial: usize, source: SignalError },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    /// Channel-major samples in microvolts.
    pub samples: Vec<Vec<f32>>,
    pub start_time: DateTime<Utc>,
}

impl Recording {
    pub fn new(
        sample_rate_hz: f64,
        channel_names: Vec<String>,
        samples: Vec<Vec<f32>>,
        start_time: DateTime<Utc>,
    ) -> Result<Self, DatasetError> {
        let rec = Self {
            sample_rate_hz,
            channel_names,
            samples,
            start_time,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn empty(sample_rate_hz: f64, channel_names: Vec<String>, start_time: DateTime<Utc>) -> Self {
        let samples = vec![Vec::new(); channel_names.len()];
        Self {
            sample_rate_hz,
            channel_names,
            samples,
            start_time,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.channel_names.len() != self.samples.len() {
            return Err(DatasetError::ChannelCountMismatch {
                names: self.channel_names.len(),
                rows: self.samples.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.channel_names.iter().find(|n| !seen.insert(*n)) {
            return Err(DatasetError::Format(format!("duplicate channel name {dup}")));
        }
        if let Some(first) = self.samples.first() {
            if self.samples.iter().any(|c| c.len() != first.len()) {
                return Err(DatasetError::Format("channels have unequal sample counts".into()));
            }
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(DatasetError::Format("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    /// Appends a channel-major block.
    pub fn append(&mut self, block: &[Vec<f32>]) -> Result<(), DatasetError> {
        if block.len() != self.channels() {
            return Err(DatasetError::ChannelCountMismatch {
                names: self.channels(),
                rows: block.len(),
            });
        }
        for (dst, src) in self.samples.iter_mut().zip(block) {
            dst.extend_from_slice(src);
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordingHeader {
    magic: String,
    schema_version: u32,
    sample_rate_hz: f64,
    channel_names: Vec<String>,
    start_time: DateTime<Utc>,
    n_samples: usize,
}

pub fn write_recording(recording: &Recording, path: &Path) -> Result<(), DatasetError> {
    recording.validate()?;
    let header = RecordingHeader {
        magic: RECORDING_MAGIC.into(),
        schema_version: SCHEMA_VERSION,
        sample_rate_hz: recording.sample_rate_hz,
        channel_names: recording.channel_names.clone(),
        start_time: recording.start_time,
        n_samples: recording.n_samples(),
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&header).map_err(|e| DatasetError::Format(e.to_string()))?;
    w.write_all(line.as_bytes()).map_err(io_err(path))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    for t in 0..recording.n_samples() {
        for channel in &recording.samples {
            w.write_all(&channel[t].to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_recording(path: &Path) -> Result<Recording, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(io_err(path))?;
    if line.last() != Some(&b'\n') {
        return Err(DatasetError::Format("missing header line".into()));
    }
    let header: RecordingHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| DatasetError::Format(format!("bad header: {e}")))?;
    if header.magic != RECORDING_MAGIC {
        return Err(DatasetError::Format(format!("bad magic {:?}", header.magic)));
    }
    if header.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err(path))?;
    let channels = header.channel_names.len();
    let expected = header.n_samples * channels * 4;
    if payload.len() != expected {
        return Err(DatasetError::Format(format!(
            "payload has {} bytes, header implies {} ({} channels x {} samples)",
            payload.len(),
            expected,
            channels,
            header.n_samples
        )));
    }
    let mut samples = vec![Vec::with_capacity(header.n_samples); channels];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        samples[i % channels].push(v);
    }
    Recording::new(header.sample_rate_hz, header.channel_names, samples, header.start_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunType {
    Offline,
    StandardOnline,
    AssistiveOnline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEvent {
    pub trial_index: usize,
    pub run_type: RunType,
    pub true_class: TrueClass,
    pub rest_onset_s: f64,
    pub cue_onset_s: f64,
    pub feedback_onset_s: f64,
    pub trial_end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub modulated: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    /// Recording path, relative to the manifest's directory.
    pub recording: String,
    pub trials: Vec<TrialEvent>,
    pub class_split: ClassSplit,
    /// Decision thresholds in force during an online run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionConfig>,
    /// Set when the run was aborted; relaxes the minimum trial count.
    #[serde(default)]
    pub aborted: bool,
}

pub const MIN_TRIALS_PER_RUN: usize = 4;
pub const MAX_TRIALS_PER_RUN: usize = 20;

impl RunManifest {
    pub fn new(run_id: impl Into<String>, recording: impl Into<String>, trials: Vec<TrialEvent>) -> Self {
        let class_split = ClassSplit::of(&trials);
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.into(),
            recording: recording.into(),
            trials,
            class_split,
            decision: None,
            aborted: false,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::VersionMismatch {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let n = self.trials.len();
        let min = if self.aborted { 0 } else { MIN_TRIALS_PER_RUN };
        if n < min || n > MAX_TRIALS_PER_RUN {
            return Err(DatasetError::InvalidManifest(format!(
                "run {} has {n} trials, expected {MIN_TRIALS_PER_RUN}-{MAX_TRIALS_PER_RUN}",
                self.run_id
            )));
        }
        for t in &self.trials {
            let ordered = t.rest_onset_s < t.cue_onset_s
                && t.cue_onset_s < t.feedback_onset_s
                && t.feedback_onset_s < t.trial_end_s;
            if !ordered {
                return Err(DatasetError::InvalidManifest(format!(
                    "trial {} events out of order",
                    t.trial_index
                )));
            }
            if t.true_class == TrueClass::Unknown && t.run_type != RunType::AssistiveOnline {
                return Err(DatasetError::InvalidManifest(format!(
                    "trial {} has unknown class outside an assistive run",
                    t.trial_index
                )));
            }
        }
        for w in self.trials.windows(2) {
            if w[1].rest_onset_s < w[0].trial_end_s {
                return Err(DatasetError::InvalidManifest(format!(
                    "trial {} overlaps trial {}",
                    w[1].trial_index, w[0].trial_index
                )));
            }
        }
        Ok(())
    }

    pub fn recording_path(&self, manifest_path: &Path) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.recording)
    }

    pub fn count(&self, class: Class) -> usize {
        self.trials
            .iter()
            .filter(|t| t.true_class.known() == Some(class))
            .count()
    }
}

impl ClassSplit {
    pub fn of(trials: &[TrialEvent]) -> Self {
        let n = trials.len().max(1) as f64;
        let count = |c| trials.iter().filter(|t| t.true_class == c).count() as f64;
        Self {
            modulated: count(TrueClass::Modulated) / n,
            baseline: count(TrueClass::Baseline) / n,
        }
    }
}

/// A list of run manifests used together for training or analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub schema_version: u32,
    /// Manifest paths, relative to the bundle file.
    pub runs: Vec<String>,
}

/// One run loaded from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub recording: Recording,
}

pub fn load_run(manifest_path: &Path) -> Result<LoadedRun, DatasetError> {
    let manifest: RunManifest = read_json(manifest_path)?;
    manifest.validate()?;
    let recording = read_recording(&manifest.recording_path(manifest_path))?;
    Ok(LoadedRun { manifest, recording })
}

pub fn load_bundle(bundle_path: &Path) -> Result<Vec<LoadedRun>, DatasetError> {
    let bundle: DatasetBundle = read_json(bundle_path)?;
    if bundle.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: bundle.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let dir = bundle_path.parent().unwrap_or_else(|| Path::new("."));
    bundle.runs.iter().map(|r| load_run(&dir.join(r))).collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DatasetError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// (channel, band) feature address. The flat index is
/// `band_index * channels + channel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub channel: usize,
    pub band: Band,
}

impl FeatureIndex {
    pub fn from_flat(index: usize, channels: usize) -> Self {
        Self {
            channel: index % channels,
            band: Band::from_index(index / channels).expect("feature index beyond two bands"),
        }
    }

    pub fn flat(&self, channels: usize) -> usize {
        self.band.index() * channels + self.channel
    }
}

/// Where the per-trial normalization baseline is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BaselineWindow {
    /// `[feedback_onset - duration_s, feedback_onset)`.
    PreFeedback { duration_s: f64 },
    /// The last `duration_s` of the rest period, which ends
    /// `rest_duration_s` after `rest_onset_s`.
    RestEnd { rest_duration_s: f64, duration_s: f64 },
}

impl Default for BaselineWindow {
    fn default() -> Self {
        BaselineWindow::PreFeedback { duration_s: 1.0 }
    }
}

impl BaselineWindow {
    /// Baseline interval `(start_s, end_s)` for a trial.
    pub fn interval(&self, trial: &TrialEvent) -> (f64, f64) {
        match *self {
            BaselineWindow::PreFeedback { duration_s } => (trial.feedback_onset_s - duration_s, trial.feedback_onset_s),
            BaselineWindow::RestEnd {
                rest_duration_s,
                duration_s,
            } => {
                let end = trial.rest_onset_s + rest_duration_s;
                (end - duration_s, end)
            }
        }
    }
}

/// Filtering and windowing parameters shared by training and decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochParams {
    pub alpha_filter: FilterSpec,
    pub beta_filter: FilterSpec,
    pub window_s: f64,
    pub step_s: f64,
    pub baseline: BaselineWindow,
}

impl EpochParams {
    pub fn standard(sample_rate_hz: f64) -> Self {
        Self {
            alpha_filter: FilterSpec::alpha(sample_rate_hz),
            beta_filter: FilterSpec::beta(sample_rate_hz),
            window_s: 2.0,
            step_s: 1.0,
            baseline: BaselineWindow::default(),
        }
    }

    pub fn with_phase_mode(mut self, mode: PhaseMode) -> Self {
        self.alpha_filter.phase_mode = mode;
        self.beta_filter.phase_mode = mode;
        self
    }
}

/// Labeled frames: one row of `2 * channels` normalized band powers per frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Class>,
    pub run_index: Vec<usize>,
    pub trial_index: Vec<usize>,
    pub frame_end_s: Vec<f64>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn extend(&mut self, other: FeatureSet) {
        self.features.extend(other.features);
        self.labels.extend(other.labels);
        self.run_index.extend(other.run_index);
        self.trial_index.extend(other.trial_index);
        self.frame_end_s.extend(other.frame_end_s);
    }

    pub fn set_run_index(&mut self, run: usize) {
        self.run_index.iter_mut().for_each(|r| *r = run);
    }

    /// Rows whose run index satisfies `keep`.
    pub fn select_runs(&self, keep: impl Fn(usize) -> bool) -> FeatureSet {
        let mut out = FeatureSet::default();
        for i in 0..self.len() {
            if keep(self.run_index[i]) {
                out.features.push(self.features[i].clone());
                out.labels.push(self.labels[i]);
                out.run_index.push(self.run_index[i]);
                out.trial_index.push(self.trial_index[i]);
                out.frame_end_s.push(self.frame_end_s[i]);
            }
        }
        out
    }

    /// Distinct run indices in first-appearance order.
    pub fn runs(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &r in &self.run_index {
            if !out.contains(&r) {
                out.push(r);
            }
        }
        out
    }
}

/// Alpha and beta band-filtered copy of a whole recording.
pub struct FilteredRecording {
    pub sample_rate_hz: f64,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl FilteredRecording {
    pub fn new(recording: &Recording, params: &EpochParams) -> Result<Self, DatasetError> {
        let raw = recording.to_f64();
        let run = |spec: &FilterSpec| -> Result<Vec<Vec<f64>>, SignalError> {
            let coeffs = signal::design_bandpass(spec)?;
            match spec.phase_mode {
                PhaseMode::Causal => {
                    let mut state = signal::StreamFilterState::new(&coeffs, raw.len());
                    signal::filter_block(&coeffs, &mut state, &raw)
                }
                PhaseMode::ZeroPhase => signal::filter_zero_phase(&coeffs, &raw),
            }
        };
        if params.alpha_filter.phase_mode == PhaseMode::Causal && params.beta_filter.phase_mode == PhaseMode::Causal {
            let mut bank = BandFilterBank::new(&params.alpha_filter, &params.beta_filter, raw.len())?;
            let (alpha, beta) = bank.process(&raw)?;
            return Ok(Self {
                sample_rate_hz: recording.sample_rate_hz,
                alpha,
                beta,
            });
        }
        Ok(Self {
            sample_rate_hz: recording.sample_rate_hz,
            alpha: run(&params.alpha_filter)?,
            beta: run(&params.beta_filter)?,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    fn samples(&self, seconds: f64) -> i64 {
        (seconds * self.sample_rate_hz).round() as i64
    }

    /// Normalized frames of one trial's feedback region.
    pub fn trial_frames(&self, trial: &TrialEvent, params: &EpochParams) -> Result<Vec<BandPowerFrame>, DatasetError> {
        let available = self.n_samples();
        let (b_start, b_end) = params.baseline.interval(trial);
        let b_start = self.samples(b_start);
        let b_end = self.samples(b_end);
        let fb = self.samples(trial.feedback_onset_s);
        let end = self.samples(trial.trial_end_s);
        let lowest = b_start.min(fb);
        if lowest < 0 || end as usize > available || b_end as usize > available {
            return Err(DatasetError::EventOutOfBounds {
                trial: trial.trial_index,
                start: lowest,
                end: end.max(b_end) as usize,
                available,
            });
        }
        let baseline = BandPowerBaseline {
            alpha_power: signal::window_power(&self.alpha, b_start as usize..b_end as usize),
            beta_power: signal::window_power(&self.beta, b_start as usize..b_end as usize),
        };
        let window = self.samples(params.window_s);
        let step = self.samples(params.step_s).max(1);
        let mut frames = Vec::new();
        let mut stop = fb + window;
        while stop <= end {
            let range = (stop - window) as usize..stop as usize;
            let frame = BandPowerFrame {
                window_end_time_s: stop as f64 / self.sample_rate_hz,
                alpha_power: signal::window_power(&self.alpha, range.clone()),
                beta_power: signal::window_power(&self.beta, range),
            };
            frames.push(signal::normalize_frame(&frame, &baseline).map_err(|source| {
                DatasetError::DegenerateBaseline {
                    trial: trial.trial_index,
                    source,
                }
            })?);
            stop += step;
        }
        Ok(frames)
    }

    /// Labeled frames for every trial of known class.
    pub fn epoch(&self, manifest: &RunManifest, params: &EpochParams) -> Result<FeatureSet, DatasetError> {
        let mut set = FeatureSet::default();
        for trial in &manifest.trials {
            let Some(class) = trial.true_class.known() else {
                continue;
            };
            for frame in self.trial_frames(trial, params)? {
                set.frame_end_s.push(frame.window_end_time_s);
                set.features.push(frame.feature_vector());
                set.labels.push(class);
                set.run_index.push(0);
                set.trial_index.push(trial.trial_index);
            }
        }
        Ok(set)
    }
}

/// Filters the recording and extracts labeled, baseline-normalized frames
/// from every trial's feedback region. Trials of unknown class are skipped.
pub fn epoch_trials(
    recording: &Recording,
    manifest: &RunManifest,
    params: &EpochParams,
) -> Result<FeatureSet, DatasetError> {
    FilteredRecording::new(recording, params)?.epoch(manifest, params)
}

/// Epochs several runs, numbering them 0.. in order.
pub fn epoch_runs(runs: &[LoadedRun], params: &EpochParams) -> Result<FeatureSet, DatasetError> {
    let mut all = FeatureSet::default();
    for (i, run) in runs.iter().enumerate() {
        let mut set = epoch_trials(&run.recording, &run.manifest, params)?;
        set.set_run_index(i);
        all.extend(set);
    }
    Ok(all)
}

/// Everything needed for online inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedDecoderFile {
    pub schema_version: u32,
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    pub preprocessing: EpochParams,
    pub selected_features: Vec<FeatureIndex>,
    /// Standardization applied before the linear model.
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub svm_weights: Vec<f64>,
    pub svm_bias: f64,
    pub regularization_c: f64,
    pub calibration_a: f64,
    pub calibration_b: f64,
    pub seed: u64,
}

pub const MIN_SELECTED_FEATURES: usize = 4;
pub const MAX_SELECTED_FEATURES: usize = 20;

impl TrainedDecoderFile {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::VersionMismatch {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let k = self.selected_features.len();
        if !(MIN_SELECTED_FEATURES..=MAX_SELECTED_FEATURES).contains(&k) {
            return Err(DatasetError::InvalidDecoder(format!(
                "{k} selected features, expected {MIN_SELECTED_FEATURES}-{MAX_SELECTED_FEATURES}"
            )));
        }
        if self.svm_weights.len() != k || self.feature_mean.len() != k || self.feature_scale.len() != k {
            return Err(DatasetError::InvalidDecoder(
                "weights/standardization length differs from selected feature count".into(),
            ));
        }
        if self
            .selected_features
            .iter()
            .any(|f| f.channel >= self.channel_names.len())
        {
            return Err(DatasetError::InvalidDecoder("feature channel out of range".into()));
        }
        let finite = self
            .svm_weights
            .iter()
            .chain(&self.feature_mean)
            .chain(&self.feature_scale)
            .chain([&self.svm_bias, &self.calibration_a, &self.calibration_b])
            .all(|v| v.is_finite());
        if !finite {
            return Err(DatasetError::InvalidDecoder("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let decoder: Self = read_json(path)?;
        decoder.validate()?;
        Ok(decoder)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        write_json(self, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_recording() -> Recording {
        let samples: Vec<Vec<f32>> = (0..32)
            .map(|c| (0..100).map(|t| (c * 1000 + t) as f32 * 0.25 - 3.0).collect())
            .collect();
        Recording::new(512.0, montage(), samples, DateTime::UNIX_EPOCH).unwrap()
    }

    #[test]
    fn recording_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.vbci");
        let rec = small_recording();
        write_recording(&rec, &path).unwrap();
        assert_eq!(read_recording(&path).unwrap(), rec);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.vbci");
        write_recording(&small_recording(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(read_recording(&path), Err(DatasetError::Format(_))));
    }

    #[test]
    fn payload_with_missing_channel_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.vbci");
        let rec = small_recording();
        write_recording(&rec, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        // Same header, but only 31 floats per time step.
        let mut out = bytes[..header_len].to_vec();
        for t in 0..rec.n_samples() {
            for c in 0..31 {
                out.extend_from_slice(&rec.samples[c][t].to_le_bytes());
            }
        }
        std::fs::write(&path, out).unwrap();
        assert!(matches!(read_recording(&path), Err(DatasetError::Format(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.vbci");
        write_recording(&small_recording(), &path).unwrap();
        let text = std::fs::read(&path).unwrap();
        let patched = String::from_utf8_lossy(&text).replacen("VBCI", "XXXX", 1);
        std::fs::write(&path, patched.as_bytes()).unwrap();
        assert!(matches!(read_recording(&path), Err(DatasetError::Format(_))));
    }

    #[test]
    fn mismatched_rows_rejected() {
        let err = Recording::new(512.0, montage(), vec![vec![0.0; 4]; 31], DateTime::UNIX_EPOCH).unwrap_err();
        assert!(matches!(
            err,
            DatasetError::ChannelCountMismatch { names: 32, rows: 31 }
        ));
    }

    fn trial(i: usize, start: f64, class: TrueClass) -> TrialEvent {
        TrialEvent {
            trial_index: i,
            run_type: RunType::Offline,
            true_class: class,
            rest_onset_s: start + 3.0,
            cue_onset_s: start + 14.0,
            feedback_onset_s: start + 15.0,
            trial_end_s: start + 25.0,
            question_text: None,
        }
    }

    #[test]
    fn ten_second_feedback_gives_nine_frames() {
        let fs = 512.0;
        let n = (30.0 * fs) as usize;
        let samples: Vec<Vec<f32>> = (0..32)
            .map(|c| (0..n).map(|t| ((t as f32) * 0.37 + c as f32).sin()).collect())
            .collect();
        let rec = Recording::new(fs, montage(), samples, DateTime::UNIX_EPOCH).unwrap();
        let manifest = RunManifest::new("r", "r.vbci", vec![trial(0, 0.0, TrueClass::Modulated)]);
        let set = epoch_trials(&rec, &manifest, &EpochParams::standard(fs)).unwrap();
        assert_eq!(set.len(), 9);
        assert_eq!(set.n_features(), 64);
        let ends: Vec<f64> = set.frame_end_s.clone();
        let expected: Vec<f64> = (2..=10).map(|k| 15.0 + k as f64).collect();
        assert_eq!(ends, expected);

        let mut late = manifest.clone();
        late.trials[0].trial_end_s = 31.0;
        assert!(matches!(
            epoch_trials(&rec, &late, &EpochParams::standard(fs)),
            Err(DatasetError::EventOutOfBounds { trial: 0, .. })
        ));
    }

    #[test]
    fn flat_baseline_is_degenerate() {
        let fs = 512.0;
        let n = (30.0 * fs) as usize;
        let rec = Recording::new(fs, montage(), vec![vec![0.0; n]; 32], DateTime::UNIX_EPOCH).unwrap();
        let manifest = RunManifest::new("r", "r.vbci", vec![trial(0, 0.0, TrueClass::Baseline)]);
        assert!(matches!(
            epoch_trials(&rec, &manifest, &EpochParams::standard(fs)),
            Err(DatasetError::DegenerateBaseline { trial: 0, .. })
        ));
    }

    #[test]
    fn manifest_validation() {
        let trials: Vec<TrialEvent> = (0..4)
            .map(|i| trial(i, 25.0 * i as f64, TrueClass::Modulated))
            .collect();
        let m = RunManifest::new("r", "r.vbci", trials.clone());
        m.validate().unwrap();
        let short = RunManifest::new("r", "r.vbci", trials[..3].to_vec());
        assert!(short.validate().is_err());
        let mut overlapping = m.clone();
        overlapping.trials[1].rest_onset_s = 20.0;
        assert!(overlapping.validate().is_err());
        let mut unknown = m.clone();
        unknown.trials[0].true_class = TrueClass::Unknown;
        assert!(unknown.validate().is_err());
    }

    #[test]
    fn feature_index_layout() {
        let f = FeatureIndex::from_flat(32 + 15, 32);
        assert_eq!(
            f,
            FeatureIndex {
                channel: 15,
                band: Band::Beta
            }
        );
        assert_eq!(MONTAGE[15], "Cz");
        assert_eq!(f.flat(32), 47);
        assert_eq!(montage_index("pz"), Some(25));
    }
}
