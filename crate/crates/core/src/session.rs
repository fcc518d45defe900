//! Session execution: the event bus and log, operator control, subject
//! sources, the run loop, replay and log evaluation.
//!
//! A session directory holds
//!
//! ```text
//! events.jsonl     header line, then one SessionEvent per line
//! session.json     SessionRecord (plan outcome, manifest list)
//! runNN.json       RunManifest per run
//! runNN.vbci       Recording per run
//! ```
//!
//! Times inside manifests are seconds from the start of the run's
//! recording; event timestamps are seconds from session start.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, VirtualClock};
use crate::dataset::{
    self, DatasetBundle, DatasetError, LoadedRun, Recording, RunManifest, RunType, TrainedDecoderFile, TrialEvent,
};
use crate::metrics::{self, RunMetrics, TrialTrace};
use crate::online::{
    self, Decision, DecisionConfig, DecodeError, DecodingStep, OnlineFeatureExtractor, Outcome, PosteriorSource,
    TracePoint, TrialDecoding,
};
use crate::protocol::{
    self, Answer, AssistiveTree, ConfidenceRating, PhaseEntry, ProtocolError, QuestionItem, RatingVerdict, RunPlan,
    SessionPlan, Timeline, TrialPhase,
};
use crate::synth::{IntentInterval, IntentSchedule, SubjectProfile, SynthError, SyntheticStream};
use crate::training::derive_seed;
use crate::{Class, TrueClass, SCHEMA_VERSION};

pub const EVENT_LOG: &str = "events.jsonl";
pub const SESSION_RECORD: &str = "session.json";
pub const LOG_TYPE: &str = "vbci-session-log";
/// Threshold at which hits and latency are scored.
pub const METRIC_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("operator abort")]
    AbortRequested,
    #[error("online runs need a decoder")]
    MissingDecoder,
    #[error("subject source: {0}")]
    Source(String),
    #[error("subject channels or rate do not match the decoder: {0}")]
    ChannelMismatch(String),
    #[error("rating rejected: {0}")]
    RatingRejected(String),
    #[error("a run is already active")]
    RunActive,
    #[error("line {line}: schema version {found} is not supported (expected {expected})")]
    VersionMismatch { line: usize, found: u32, expected: u32 },
    #[error("line {line}: {message}")]
    FormatError { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Stats(#[from] metrics::StatsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub run_index: usize,
    pub run_type: RunType,
    pub trial_index: usize,
    pub phase: TrialPhase,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorUpdate {
    pub run_index: usize,
    pub trial_index: usize,
    /// Seconds from decoding onset.
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceUpdate {
    pub run_index: usize,
    pub trial_index: usize,
    pub t: f64,
    pub prob_modulated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneUpdate {
    pub run_index: usize,
    pub trial_index: usize,
    pub frequency_hz: f64,
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub run_index: usize,
    pub trial_index: usize,
    pub outcome: Outcome,
    pub decision_time_s: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionShown {
    pub run_index: usize,
    pub trial_index: usize,
    pub question_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_answer: Option<Answer>,
    /// Class the operator asked for in an offline trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructed_class: Option<Class>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeMove {
    pub run_index: usize,
    pub trial_index: usize,
    pub from_node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    /// `None` when the traversal ends.
    #[serde(default)]
    pub to_node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_question: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecorded {
    pub run_index: usize,
    pub trial_index: usize,
    pub score: u8,
    pub verdict: RatingVerdict,
    pub decided: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_index: usize,
    pub run_id: String,
    pub run_type: RunType,
    pub completed_trials: usize,
    pub aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEvent {
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventKind {
    PhaseChange(PhaseChange),
    Posterior(PosteriorUpdate),
    Evidence(EvidenceUpdate),
    Tone(ToneUpdate),
    Decision(DecisionEvent),
    QuestionShown(QuestionShown),
    TreeMove(TreeMove),
    RatingRecorded(RatingRecorded),
    RunSummary(RunSummary),
    Error(ErrorEvent),
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::PhaseChange(_) => "PhaseChange",
            EventKind::Posterior(_) => "Posterior",
            EventKind::Evidence(_) => "Evidence",
            EventKind::Tone(_) => "Tone",
            EventKind::Decision(_) => "Decision",
            EventKind::QuestionShown(_) => "QuestionShown",
            EventKind::TreeMove(_) => "TreeMove",
            EventKind::RatingRecorded(_) => "RatingRecorded",
            EventKind::RunSummary(_) => "RunSummary",
            EventKind::Error(_) => "Error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub timestamp_s: f64,
    #[serde(flatten)]
    pub event: EventKind,
}

/// First line of every event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    #[serde(rename = "type")]
    pub log_type: String,
    pub schema_version: u32,
    pub session_id: String,
    pub created: DateTime<Utc>,
}

/// Returns `false` to unsubscribe.
type Subscriber = Box<dyn FnMut(&SessionEvent) -> bool + Send>;

struct BusInner {
    next_seq: u64,
    last_timestamp_s: f64,
    log: Option<(PathBuf, BufWriter<File>)>,
    subscribers: Vec<Subscriber>,
    history: Vec<SessionEvent>,
    log_failure: Option<String>,
}

/// Numbers events, appends them to the log and fans them out to
/// subscribers, all under one lock so every consumer sees the same order.
#[derive(Clone)]
pub struct EventBus {
    inner: Arc<Mutex<BusInner>>,
}

impl Default for EventBus {
    fn default() -> Self {
        Self::new()
    }
}

impl EventBus {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Mutex::new(BusInner {
                next_seq: 0,
                last_timestamp_s: 0.0,
                log: None,
                subscribers: Vec::new(),
                history: Vec::new(),
                log_failure: None,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, BusInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Starts a new log file with its header line. Events emitted earlier
    /// are not copied.
    pub fn open_log(&self, path: &Path, header: &LogHeader) -> Result<(), SessionError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let line = serde_json::to_string(header).expect("header serializes");
        writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io_err(path))?;
        self.lock().log = Some((path.to_path_buf(), w));
        Ok(())
    }

    pub fn close_log(&self) {
        if let Some((_, mut w)) = self.lock().log.take() {
            let _ = w.flush();
        }
    }

    /// Emits at `timestamp_s`, clamped so timestamps never decrease.
    pub fn emit(&self, timestamp_s: f64, event: EventKind) -> SessionEvent {
        let mut inner = self.lock();
        let ts = timestamp_s.max(inner.last_timestamp_s);
        inner.last_timestamp_s = ts;
        let ev = SessionEvent {
            seq: inner.next_seq,
            timestamp_s: ts,
            event,
        };
        inner.next_seq += 1;
        if let Some((path, w)) = inner.log.as_mut() {
            let line = serde_json::to_string(&ev).expect("events serialize");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                let msg = format!("{}: {e}", path.display());
                inner.log_failure.get_or_insert(msg);
            }
        }
        inner.subscribers.retain_mut(|s| s(&ev));
        inner.history.push(ev.clone());
        ev
    }

    /// Emits at the latest timestamp seen so far.
    pub fn emit_now(&self, event: EventKind) -> SessionEvent {
        let ts = self.lock().last_timestamp_s;
        self.emit(ts, event)
    }

    pub fn subscribe(&self, mut f: impl FnMut(&SessionEvent) + Send + 'static) {
        self.lock().subscribers.push(Box::new(move |e| {
            f(e);
            true
        }));
    }

    /// Registers `f` and returns every past event with `seq >= from_seq`,
    /// atomically, so nothing is missed or duplicated. `f` is dropped once
    /// it returns `false`.
    pub fn subscribe_from(
        &self,
        from_seq: u64,
        f: impl FnMut(&SessionEvent) -> bool + Send + 'static,
    ) -> Vec<SessionEvent> {
        let mut inner = self.lock();
        inner.subscribers.push(Box::new(f));
        inner.history.iter().filter(|e| e.seq >= from_seq).cloned().collect()
    }

    /// Drops every subscriber, ending their streams.
    pub fn clear_subscribers(&self) {
        self.lock().subscribers.clear();
    }

    pub fn history(&self) -> Vec<SessionEvent> {
        self.lock().history.clone()
    }

    pub fn next_seq(&self) -> u64 {
        self.lock().next_seq
    }

    pub fn log_failure(&self) -> Option<String> {
        self.lock().log_failure.clone()
    }
}

/// Reads an event log, reporting the 1-based line of any problem.
pub fn read_event_log(path: &Path) -> Result<(LogHeader, Vec<SessionEvent>), SessionError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, first) = lines.next().ok_or(SessionError::FormatError {
        line: 1,
        message: "empty log".into(),
    })?;
    let first = first.map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&first).map_err(|e| SessionError::FormatError {
        line: 1,
        message: e.to_string(),
    })?;
    if let Some(v) = value.get("schema_version").and_then(|v| v.as_u64()) {
        if v != SCHEMA_VERSION as u64 {
            return Err(SessionError::VersionMismatch {
                line: 1,
                found: v as u32,
                expected: SCHEMA_VERSION,
            });
        }
    }
    let header: LogHeader = serde_json::from_value(value).map_err(|e| SessionError::FormatError {
        line: 1,
        message: e.to_string(),
    })?;
    if header.log_type != LOG_TYPE {
        return Err(SessionError::FormatError {
            line: 1,
            message: format!("not a session log ({:?})", header.log_type),
        });
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: SessionEvent = serde_json::from_str(&line).map_err(|e| SessionError::FormatError {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(ev);
    }
    Ok((header, events))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRating {
    pub run_index: usize,
    pub trial_index: usize,
    pub decided: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedRating {
    pub run_index: usize,
    pub trial_index: usize,
    pub rating: ConfidenceRating,
    pub verdict: RatingVerdict,
    pub decided: Outcome,
}

impl RecordedRating {
    /// The answer the caretaker believes was intended.
    pub fn inferred_class(&self) -> Option<Class> {
        let decided = self.decided.class()?;
        Some(match self.verdict {
            RatingVerdict::Correct => decided,
            RatingVerdict::Incorrect => decided.opposite(),
        })
    }
}

/// Operator-side state shared with a running session.
#[derive(Debug, Default)]
pub struct SessionControl {
    abort: AtomicBool,
    pending: Mutex<Option<PendingRating>>,
    ratings: Mutex<Vec<RecordedRating>>,
    decision_override: Mutex<Option<DecisionConfig>>,
}

impl SessionControl {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request_abort(&self) {
        self.abort.store(true, Ordering::SeqCst);
    }

    pub fn abort_requested(&self) -> bool {
        self.abort.load(Ordering::SeqCst)
    }

    pub fn abort_flag(&self) -> &AtomicBool {
        &self.abort
    }

    pub fn clear_abort(&self) {
        self.abort.store(false, Ordering::SeqCst);
    }

    /// Thresholds for runs started from now on.
    pub fn set_decision(&self, config: DecisionConfig) -> Result<(), DecodeError> {
        config.validate()?;
        *self.decision_override.lock().unwrap() = Some(config);
        Ok(())
    }

    pub fn decision_override(&self) -> Option<DecisionConfig> {
        *self.decision_override.lock().unwrap()
    }

    pub fn pending_rating(&self) -> Option<PendingRating> {
        self.pending.lock().unwrap().clone()
    }

    fn open_rating(&self, pending: PendingRating) {
        *self.pending.lock().unwrap() = Some(pending);
    }

    fn close_rating(&self) {
        *self.pending.lock().unwrap() = None;
    }

    /// Records the caretaker's confidence for the pending assistive trial.
    pub fn submit_rating(
        &self,
        bus: &EventBus,
        score: u8,
        note: Option<String>,
    ) -> Result<RecordedRating, SessionError> {
        let mut pending = self.pending.lock().unwrap();
        let Some(p) = pending.clone() else {
            return Err(SessionError::RatingRejected(
                "no assistive decision is awaiting a rating".into(),
            ));
        };
        let rating = ConfidenceRating::new(p.trial_index, score, note)
            .map_err(|e| SessionError::RatingRejected(e.to_string()))?;
        let verdict = protocol::score_confidence(&rating);
        let recorded = RecordedRating {
            run_index: p.run_index,
            trial_index: p.trial_index,
            rating: rating.clone(),
            verdict,
            decided: p.decided,
        };
        *pending = None;
        self.ratings.lock().unwrap().push(recorded.clone());
        bus.emit_now(EventKind::RatingRecorded(RatingRecorded {
            run_index: p.run_index,
            trial_index: p.trial_index,
            score,
            verdict,
            decided: p.decided,
            note: rating.note,
        }));
        Ok(recorded)
    }

    pub fn ratings(&self) -> Vec<RecordedRating> {
        self.ratings.lock().unwrap().clone()
    }
}

/// Source of EEG samples for a session.
pub trait SubjectSource: Send {
    fn describe(&self) -> String;
    fn channel_names(&self) -> Vec<String>;
    fn sample_rate_hz(&self) -> f64;
    /// Prepares run `run_index`; sample time restarts at zero.
    fn begin_run(&mut self, run_index: usize) -> Result<(), SessionError>;
    /// From run time `from_s` on, the subject intends `class` (`None`: rest).
    fn set_intent(&mut self, from_s: f64, class: Option<Class>);
    /// The next `n` samples per channel, channel-major.
    fn read(&mut self, n: usize) -> Result<Vec<Vec<f32>>, SessionError>;
}

/// Synthetic subject following the intents it is given.
pub struct SyntheticSubject {
    profile: SubjectProfile,
    stream: Option<SyntheticStream>,
    schedule: IntentSchedule,
}

impl SyntheticSubject {
    pub fn new(profile: SubjectProfile) -> Result<Self, SessionError> {
        profile.validate()?;
        Ok(Self {
            profile,
            stream: None,
            schedule: IntentSchedule::default(),
        })
    }
}

impl SubjectSource for SyntheticSubject {
    fn describe(&self) -> String {
        format!("synthetic (seed {})", self.profile.seed)
    }

    fn channel_names(&self) -> Vec<String> {
        self.profile.channel_names.clone()
    }

    fn sample_rate_hz(&self) -> f64 {
        self.profile.sample_rate_hz
    }

    fn begin_run(&mut self, run_index: usize) -> Result<(), SessionError> {
        let profile = self
            .profile
            .clone()
            .with_seed(derive_seed(self.profile.seed, run_index as u64, 0));
        self.stream = Some(SyntheticStream::new(&profile)?);
        self.schedule = IntentSchedule::default();
        Ok(())
    }

    fn set_intent(&mut self, from_s: f64, class: Option<Class>) {
        if let Some(last) = self.schedule.intervals.last_mut() {
            if last.offset_s > from_s {
                last.offset_s = from_s;
            }
            if last.offset_s <= last.onset_s {
                self.schedule.intervals.pop();
            }
        }
        if let Some(class) = class {
            self.schedule.intervals.push(IntentInterval {
                onset_s: from_s,
                offset_s: f64::INFINITY,
                class,
            });
        }
    }

    fn read(&mut self, n: usize) -> Result<Vec<Vec<f32>>, SessionError> {
        let stream = self
            .stream
            .as_mut()
            .ok_or_else(|| SessionError::Source("read before begin_run".into()))?;
        Ok(stream.next_block(n, &self.schedule))
    }
}

/// Plays back the run recordings of an earlier session.
pub struct ReplaySubject {
    dir: PathBuf,
    manifests: Vec<String>,
    channel_names: Vec<String>,
    sample_rate_hz: f64,
    current: Option<(Recording, usize)>,
}

impl ReplaySubject {
    pub fn open(session_dir: &Path) -> Result<Self, SessionError> {
        let record: SessionRecord = dataset::read_json(&session_dir.join(SESSION_RECORD))?;
        let first = record
            .runs
            .first()
            .ok_or_else(|| SessionError::Source("session has no runs".into()))?;
        let run = dataset::load_run(&session_dir.join(&first.manifest))?;
        Ok(Self {
            dir: session_dir.to_path_buf(),
            manifests: record.runs.iter().map(|r| r.manifest.clone()).collect(),
            channel_names: run.recording.channel_names.clone(),
            sample_rate_hz: run.recording.sample_rate_hz,
            current: None,
        })
    }
}

impl SubjectSource for ReplaySubject {
    fn describe(&self) -> String {
        format!("replay of {}", self.dir.display())
    }

    fn channel_names(&self) -> Vec<String> {
        self.channel_names.clone()
    }

    fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    fn begin_run(&mut self, run_index: usize) -> Result<(), SessionError> {
        let name = self
            .manifests
            .get(run_index)
            .ok_or_else(|| SessionError::Source(format!("recorded session has no run {}", run_index + 1)))?;
        let run = dataset::load_run(&self.dir.join(name))?;
        self.current = Some((run.recording, 0));
        Ok(())
    }

    fn set_intent(&mut self, _from_s: f64, _class: Option<Class>) {}

    fn read(&mut self, n: usize) -> Result<Vec<Vec<f32>>, SessionError> {
        let (rec, pos) = self
            .current
            .as_mut()
            .ok_or_else(|| SessionError::Source("read before begin_run".into()))?;
        if *pos + n > rec.n_samples() {
            return Err(SessionError::Source("recording exhausted".into()));
        }
        let block = rec.samples.iter().map(|c| c[*pos..*pos + n].to_vec()).collect();
        *pos += n;
        Ok(block)
    }
}

/// Placeholder for a live amplifier; every run fails.
pub struct StubSubject {
    channel_names: Vec<String>,
    sample_rate_hz: f64,
}

impl Default for StubSubject {
    fn default() -> Self {
        Self {
            channel_names: dataset::montage(),
            sample_rate_hz: dataset::DEFAULT_SAMPLE_RATE_HZ,
        }
    }
}

impl SubjectSource for StubSubject {
    fn describe(&self) -> String {
        "live adapter stub".into()
    }

    fn channel_names(&self) -> Vec<String> {
        self.channel_names.clone()
    }

    fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    fn begin_run(&mut self, _run_index: usize) -> Result<(), SessionError> {
        Err(SessionError::Source("no live amplifier adapter is available".into()))
    }

    fn set_intent(&mut self, _from_s: f64, _class: Option<Class>) {}

    fn read(&mut self, _n: usize) -> Result<Vec<Vec<f32>>, SessionError> {
        Err(SessionError::Source("no live amplifier adapter is available".into()))
    }
}

/// `replay:<session dir>`, `synthetic:<profile.json>` or `stub`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SubjectSpec {
    Replay(PathBuf),
    Synthetic(PathBuf),
    Stub,
}

impl FromStr for SubjectSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "stub" {
            return Ok(SubjectSpec::Stub);
        }
        match s.split_once(':') {
            Some(("replay", p)) if !p.is_empty() => Ok(SubjectSpec::Replay(p.into())),
            Some(("synthetic", p)) if !p.is_empty() => Ok(SubjectSpec::Synthetic(p.into())),
            _ => Err(format!(
                "subject must be replay:<dir>, synthetic:<profile.json> or stub, got {s:?}"
            )),
        }
    }
}

impl std::fmt::Display for SubjectSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubjectSpec::Replay(p) => write!(f, "replay:{}", p.display()),
            SubjectSpec::Synthetic(p) => write!(f, "synthetic:{}", p.display()),
            SubjectSpec::Stub => f.write_str("stub"),
        }
    }
}

impl From<SubjectSpec> for String {
    fn from(s: SubjectSpec) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for SubjectSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl SubjectSpec {
    /// Builds the source; a synthetic profile's seed is replaced by `seed`
    /// when one is given.
    pub fn open(&self, seed: Option<u64>) -> Result<Box<dyn SubjectSource>, SessionError> {
        Ok(match self {
            SubjectSpec::Replay(dir) => Box::new(ReplaySubject::open(dir)?),
            SubjectSpec::Synthetic(path) => {
                let mut profile = SubjectProfile::load(path)?;
                if let Some(s) = seed {
                    profile.seed = s;
                }
                Box::new(SyntheticSubject::new(profile)?)
            }
            SubjectSpec::Stub => Box::new(StubSubject::default()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub true_class: TrueClass,
    /// What the subject was asked or scripted to answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intended: Option<Class>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding: Option<TrialDecoding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<RecordedRating>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub run_id: String,
    pub run_type: RunType,
    /// Manifest file name inside the session directory.
    pub manifest: String,
    pub trials: Vec<TrialRecord>,
    pub aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RunMetrics>,
    /// Node ids visited in an assistive run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tree_path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: u32,
    pub session_id: String,
    pub subject: String,
    pub runs: Vec<RunRecord>,
    pub aborted: bool,
}

impl SessionRecord {
    /// Bundle of the offline runs, for training.
    pub fn offline_bundle(&self, prefix: &str) -> DatasetBundle {
        DatasetBundle {
            schema_version: SCHEMA_VERSION,
            runs: self
                .runs
                .iter()
                .filter(|r| r.run_type == RunType::Offline && !r.aborted)
                .map(|r| format!("{prefix}{}", r.manifest))
                .collect(),
        }
    }

    pub fn decisions(&self) -> Vec<(usize, usize, Decision)> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.trials
                    .iter()
                    .filter_map(move |t| t.decoding.as_ref().map(|d| (r.run_index, t.trial_index, d.decision)))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub out_dir: PathBuf,
    /// Wall-clock time of session start, written into recording headers.
    pub start_time: DateTime<Utc>,
    pub chance_permutations: usize,
    pub seed: u64,
    /// Rate assistive decisions automatically from the scripted answers,
    /// standing in for the caretaker.
    pub auto_rate: bool,
}

impl SessionOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            start_time: DateTime::from_timestamp(946_684_800, 0).expect("valid epoch"),
            chance_permutations: metrics::CHANCE_PERMUTATIONS,
            seed: 0,
            auto_rate: false,
        }
    }
}

/// Per-run acquisition state: keeps the subject, the recording and the
/// online feature extractor in step with run time.
struct Acquisition<'a> {
    subject: &'a mut dyn SubjectSource,
    recording: Recording,
    extractor: Option<OnlineFeatureExtractor>,
    sample_rate_hz: f64,
}

impl Acquisition<'_> {
    /// Acquires every sample up to run time `t_s`.
    fn pump_to(&mut self, t_s: f64) -> Result<(), SessionError> {
        let target = dataset_samples(t_s, self.sample_rate_hz);
        let have = self.recording.n_samples();
        if target > have {
            let block = self.subject.read(target - have)?;
            if let Some(x) = self.extractor.as_mut() {
                x.push(&block)?;
            }
            self.recording.append(&block)?;
        }
        Ok(())
    }
}

fn dataset_samples(t_s: f64, fs: f64) -> usize {
    crate::signal::seconds_to_samples(t_s, fs)
}

/// Posteriors computed from live samples as run time advances.
struct LivePosteriors<'a, 'b> {
    acq: &'a mut Acquisition<'b>,
    decoder: &'a TrainedDecoderFile,
    onset_s: f64,
    failure: Option<SessionError>,
}

impl PosteriorSource for LivePosteriors<'_, '_> {
    fn next_posterior(&mut self, elapsed_s: f64) -> Result<Option<f64>, DecodeError> {
        if let Err(e) = self.acq.pump_to(self.onset_s + elapsed_s) {
            let msg = e.to_string();
            self.failure = Some(e);
            return Err(DecodeError::Source(msg));
        }
        let frame = self
            .acq
            .extractor
            .as_ref()
            .ok_or(DecodeError::MissingBaseline)?
            .current_frame()?;
        online::posterior(self.decoder, &frame).map(Some)
    }
}

struct RunContext<'a> {
    run_index: usize,
    run_type: RunType,
    /// Session time at run start.
    t0: f64,
    bus: &'a EventBus,
}

impl RunContext<'_> {
    fn emit(&self, rel_s: f64, kind: EventKind) {
        self.bus.emit(self.t0 + rel_s, kind);
    }

    fn phase(&self, trial_start: f64, trial_index: usize, e: &PhaseEntry) {
        self.emit(
            trial_start + e.onset_s,
            EventKind::PhaseChange(PhaseChange {
                run_index: self.run_index,
                run_type: self.run_type,
                trial_index,
                phase: e.phase,
                duration_s: e.duration_s,
                text: e.text.clone(),
            }),
        );
    }
}

fn interrupted(e: DecodeError) -> SessionError {
    match e {
        DecodeError::Interrupted => SessionError::AbortRequested,
        other => SessionError::Decode(other),
    }
}

/// Walks the clock to `t_rel` (run time), acquiring samples on the way.
fn advance(
    clock: &mut dyn Clock,
    ctx: &RunContext<'_>,
    acq: &mut Acquisition<'_>,
    t_rel: f64,
    control: &SessionControl,
) -> Result<(), SessionError> {
    if !clock.advance_to(ctx.t0 + t_rel, control.abort_flag()) {
        return Err(SessionError::AbortRequested);
    }
    acq.pump_to(t_rel)
}

struct TrialSpec {
    question: Option<QuestionItem>,
    true_class: TrueClass,
    intended: Option<Class>,
}

/// Result of executing one run, complete or cut short.
struct RunOutcome {
    trials: Vec<TrialRecord>,
    events: Vec<TrialEvent>,
    tree_path: Vec<String>,
    aborted: bool,
    end_rel: f64,
}

#[allow(clippy::too_many_arguments)]
fn execute_run(
    plan: &SessionPlan,
    run: &RunPlan,
    decision: &DecisionConfig,
    decoder: Option<&TrainedDecoderFile>,
    clock: &mut dyn Clock,
    ctx: &RunContext<'_>,
    acq: &mut Acquisition<'_>,
    control: &SessionControl,
    options: &SessionOptions,
) -> Result<RunOutcome, SessionError> {
    let timings = &plan.timings;
    let mut out = RunOutcome {
        trials: Vec::new(),
        events: Vec::new(),
        tree_path: Vec::new(),
        aborted: false,
        end_rel: 0.0,
    };
    let mut cursor = 0.0;
    let mut node: Option<String> = match run {
        RunPlan::AssistiveOnline { tree, .. } => Some(tree.root.clone()),
        _ => None,
    };
    let n_trials = match run {
        RunPlan::Offline { classes } => classes.len(),
        RunPlan::StandardOnline { questions } => questions.len(),
        RunPlan::AssistiveOnline { tree, .. } => tree.depth(),
    };

    for trial_index in 0..n_trials {
        let result = (|| -> Result<(TrialRecord, TrialEvent, f64, Option<String>), SessionError> {
            match run {
                RunPlan::Offline { classes } => {
                    let class = classes[trial_index];
                    let (record, event, end) =
                        offline_trial(trial_index, class, timings, clock, ctx, acq, control, cursor)?;
                    Ok((record, event, end, None))
                }
                RunPlan::StandardOnline { questions } => {
                    let q = &questions[trial_index];
                    let intended = q.expected_answer.map(Answer::class);
                    let spec = TrialSpec {
                        question: Some(q.clone()),
                        true_class: intended.map_or(TrueClass::Unknown, TrueClass::from),
                        intended,
                    };
                    let decoder = decoder.ok_or(SessionError::MissingDecoder)?;
                    let (record, event, end) = online_trial(
                        trial_index,
                        &spec,
                        plan,
                        decision,
                        decoder,
                        clock,
                        ctx,
                        acq,
                        control,
                        cursor,
                    )?;
                    Ok((record, event, end, None))
                }
                RunPlan::AssistiveOnline { tree, intended_answers } => {
                    let id = node.clone().expect("active node");
                    let n = tree.node(&id)?;
                    let spec = TrialSpec {
                        question: Some(n.as_question()),
                        true_class: TrueClass::Unknown,
                        intended: intended_answers.get(trial_index).map(|a| a.class()),
                    };
                    let decoder = decoder.ok_or(SessionError::MissingDecoder)?;
                    let (mut record, event, end) = online_trial(
                        trial_index,
                        &spec,
                        plan,
                        decision,
                        decoder,
                        clock,
                        ctx,
                        acq,
                        control,
                        cursor,
                    )?;
                    let outcome = record.decoding.as_ref().map(|d| d.decision);
                    let answer = outcome.and_then(|d| Answer::from_outcome(d.outcome));
                    let next = match answer {
                        Some(a) => protocol::assistive_next(tree, &id, a)?.map(|n| n.id.clone()),
                        None => None,
                    };
                    ctx.emit(
                        end,
                        EventKind::TreeMove(TreeMove {
                            run_index: ctx.run_index,
                            trial_index,
                            from_node: id.clone(),
                            answer,
                            to_node: next.clone(),
                            to_question: next
                                .as_deref()
                                .and_then(|n| tree.node(n).ok())
                                .map(|n| n.question.clone()),
                        }),
                    );
                    if let Some(d) = outcome.filter(|d| d.outcome != Outcome::Timeout) {
                        control.open_rating(PendingRating {
                            run_index: ctx.run_index,
                            trial_index,
                            decided: d.outcome,
                        });
                        if options.auto_rate {
                            if let Some(intended) = spec.intended {
                                let score = if d.outcome.class() == Some(intended) { 5 } else { 2 };
                                control.submit_rating(ctx.bus, score, Some("automatic".into()))?;
                            }
                        }
                    }
                    record.question_id = Some(id);
                    Ok((record, event, end, next))
                }
            }
        })();
        match result {
            Ok((record, event, end, next)) => {
                if let Some(id) = &node {
                    out.tree_path.push(id.clone());
                }
                out.trials.push(record);
                out.events.push(event);
                cursor = end;
                if matches!(run, RunPlan::AssistiveOnline { .. }) {
                    if next.is_none() {
                        break;
                    }
                    node = next;
                }
            }
            Err(SessionError::AbortRequested) => {
                out.aborted = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    out.end_rel = cursor;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn offline_trial(
    trial_index: usize,
    class: Class,
    timings: &protocol::PhaseTimings,
    clock: &mut dyn Clock,
    ctx: &RunContext<'_>,
    acq: &mut Acquisition<'_>,
    control: &SessionControl,
    start: f64,
) -> Result<(TrialRecord, TrialEvent, f64), SessionError> {
    let timeline = protocol::build_offline_timeline(trial_index, class, timings);
    let fo = start + timeline.feedback_onset_s();
    let end = start + timeline.end_s();
    for e in &timeline.entries {
        let at = start + e.onset_s;
        advance(clock, ctx, acq, at, control)?;
        ctx.phase(start, trial_index, e);
        match e.phase {
            TrialPhase::Cue => ctx.emit(
                at,
                EventKind::QuestionShown(QuestionShown {
                    run_index: ctx.run_index,
                    trial_index,
                    question_id: format!("trial{}", trial_index + 1),
                    text: e.text.clone().unwrap_or_default(),
                    expected_answer: None,
                    instructed_class: Some(class),
                }),
            ),
            TrialPhase::Feedback => {
                acq.subject.set_intent(fo, Some(class));
                let steps = timings.offline_feedback_s.floor() as usize;
                for k in 0..=steps {
                    let t = fo + k as f64;
                    advance(clock, ctx, acq, t, control)?;
                    ctx.emit(
                        t,
                        EventKind::Tone(ToneUpdate {
                            run_index: ctx.run_index,
                            trial_index,
                            frequency_hz: class.tone_hz(),
                            volume: protocol::offline_feedback_volume(k as f64, timings),
                        }),
                    );
                }
            }
            TrialPhase::Ended => acq.subject.set_intent(end, None),
            _ => {}
        }
    }
    let event = TrialEvent {
        trial_index,
        run_type: RunType::Offline,
        true_class: class.into(),
        rest_onset_s: start + timeline.onset(TrialPhase::Rest).unwrap_or(0.0),
        cue_onset_s: start + timeline.onset(TrialPhase::Cue).unwrap_or(0.0),
        feedback_onset_s: fo,
        trial_end_s: end,
        question_text: None,
    };
    let record = TrialRecord {
        trial_index,
        true_class: class.into(),
        intended: Some(class),
        question_id: None,
        decoding: None,
        rating: None,
    };
    Ok((record, event, end))
}

#[allow(clippy::too_many_arguments)]
fn online_trial(
    trial_index: usize,
    spec: &TrialSpec,
    plan: &SessionPlan,
    decision: &DecisionConfig,
    decoder: &TrainedDecoderFile,
    clock: &mut dyn Clock,
    ctx: &RunContext<'_>,
    acq: &mut Acquisition<'_>,
    control: &SessionControl,
    start: f64,
) -> Result<(TrialRecord, TrialEvent, f64), SessionError> {
    let question = spec.question.as_ref().expect("online trials have a question");
    let timeline: Timeline = protocol::build_online_timeline(trial_index, question, &plan.timings, decision)?;
    let fo = start + timeline.feedback_onset_s();
    for e in &timeline.entries {
        let at = start + e.onset_s;
        advance(clock, ctx, acq, at, control)?;
        ctx.phase(start, trial_index, e);
        if e.phase == TrialPhase::Cue {
            ctx.emit(
                at,
                EventKind::QuestionShown(QuestionShown {
                    run_index: ctx.run_index,
                    trial_index,
                    question_id: question.id.clone(),
                    text: question.text.clone(),
                    expected_answer: question.expected_answer,
                    instructed_class: None,
                }),
            );
        }
    }
    // The subject answers from the start of decoding.
    acq.subject.set_intent(fo, spec.intended);
    acq.extractor
        .as_mut()
        .ok_or(SessionError::MissingDecoder)?
        .capture_baseline();

    let (run_index, t0, bus) = (ctx.run_index, ctx.t0, ctx.bus);
    let mut source = LivePosteriors {
        acq,
        decoder,
        onset_s: fo,
        failure: None,
    };
    let decoding = online::run_trial_decoding(
        &mut source,
        decision,
        decoder.preprocessing.window_s,
        clock,
        t0 + fo,
        control.abort_flag(),
        |step: &DecodingStep| {
            let ts = t0 + fo + step.t;
            bus.emit(
                ts,
                EventKind::Posterior(PosteriorUpdate {
                    run_index,
                    trial_index,
                    t: step.t,
                    p: step.posterior,
                }),
            );
            bus.emit(
                ts,
                EventKind::Evidence(EvidenceUpdate {
                    run_index,
                    trial_index,
                    t: step.t,
                    prob_modulated: step.state.prob_modulated,
                }),
            );
            bus.emit(
                ts,
                EventKind::Tone(ToneUpdate {
                    run_index,
                    trial_index,
                    frequency_hz: step.tone.frequency_hz,
                    volume: step.tone.volume,
                }),
            );
        },
    );
    if let Some(failure) = source.failure.take() {
        return Err(failure);
    }
    let decoding = decoding.map_err(interrupted)?;
    let d = decoding.decision;
    let decided_at = fo + d.decision_time_s;
    acq.subject.set_intent(decided_at, None);
    ctx.emit(
        decided_at,
        EventKind::Decision(DecisionEvent {
            run_index,
            trial_index,
            outcome: d.outcome,
            decision_time_s: d.decision_time_s,
            message: d.outcome.message().into(),
        }),
    );
    let message_s = plan.timings.outcome_message_s(d.outcome);
    ctx.emit(
        decided_at,
        EventKind::PhaseChange(PhaseChange {
            run_index,
            run_type: ctx.run_type,
            trial_index,
            phase: TrialPhase::Ended,
            duration_s: message_s,
            text: Some(d.outcome.message().into()),
        }),
    );
    let end = decided_at + message_s;
    advance(clock, ctx, acq, end, control)?;
    let event = TrialEvent {
        trial_index,
        run_type: ctx.run_type,
        true_class: spec.true_class,
        rest_onset_s: start + timeline.onset(TrialPhase::Rest).unwrap_or(0.0),
        cue_onset_s: start + timeline.onset(TrialPhase::Cue).unwrap_or(0.0),
        feedback_onset_s: fo,
        trial_end_s: decided_at,
        question_text: Some(question.text.clone()),
    };
    let record = TrialRecord {
        trial_index,
        true_class: spec.true_class,
        intended: spec.intended,
        question_id: Some(question.id.clone()),
        decoding: Some(decoding),
        rating: None,
    };
    Ok((record, event, end))
}

/// Traces with a known or caretaker-inferred true class.
pub fn scored_traces(run: &RunRecord) -> Vec<TrialTrace> {
    run.trials
        .iter()
        .filter_map(|t| {
            let d = t.decoding.as_ref()?;
            let truth = t
                .true_class
                .known()
                .or_else(|| t.rating.as_ref().and_then(RecordedRating::inferred_class))?;
            Some(TrialTrace {
                trial_id: t.trial_index,
                true_class: truth,
                points: d.trace.clone(),
                outcome: Some(d.decision.outcome),
            })
        })
        .collect()
}

/// Checks that `decoder` fits the plan and the subject.
pub fn check_decoder(
    plan: &SessionPlan,
    decoder: Option<&TrainedDecoderFile>,
    subject: &dyn SubjectSource,
) -> Result<(), SessionError> {
    if !plan.needs_decoder() {
        return Ok(());
    }
    let d = decoder.ok_or(SessionError::MissingDecoder)?;
    d.validate()?;
    if d.channel_names != subject.channel_names() || d.sample_rate_hz != subject.sample_rate_hz() {
        return Err(SessionError::ChannelMismatch(format!(
            "decoder has {} channels at {} Hz, subject {} at {} Hz",
            d.channel_names.len(),
            d.sample_rate_hz,
            subject.channel_names().len(),
            subject.sample_rate_hz()
        )));
    }
    Ok(())
}

/// Opens `events.jsonl` in `dir` for `session_id`.
pub fn open_session_log(
    bus: &EventBus,
    dir: &Path,
    session_id: &str,
    created: DateTime<Utc>,
) -> Result<PathBuf, SessionError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(EVENT_LOG);
    bus.open_log(
        &path,
        &LogHeader {
            log_type: LOG_TYPE.into(),
            schema_version: SCHEMA_VERSION,
            session_id: session_id.into(),
            created,
        },
    )?;
    Ok(path)
}

impl SessionRecord {
    pub fn new(plan: &SessionPlan, subject: &dyn SubjectSource) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            session_id: plan.session_id.clone(),
            subject: subject.describe(),
            runs: Vec::new(),
            aborted: false,
        }
    }
}

/// Runs every run of `plan` in order, writing recordings, manifests and the
/// session record into `options.out_dir`. An operator abort ends the
/// session early; the returned record then has `aborted` set and keeps
/// every completed trial.
pub fn run_session(
    plan: &SessionPlan,
    decoder: Option<&TrainedDecoderFile>,
    subject: &mut dyn SubjectSource,
    clock: &mut dyn Clock,
    control: &SessionControl,
    bus: &EventBus,
    options: &SessionOptions,
) -> Result<SessionRecord, SessionError> {
    plan.validate()?;
    check_decoder(plan, decoder, subject)?;
    let mut record = SessionRecord::new(plan, subject);
    for run_index in 0..plan.runs.len() {
        if control.abort_requested() {
            record.aborted = true;
            break;
        }
        run_plan_run(
            plan,
            run_index,
            decoder,
            subject,
            clock,
            control,
            bus,
            options,
            &mut record,
        )?
        .publish(bus);
        if record.aborted {
            break;
        }
    }
    dataset::write_json(&record, &options.out_dir.join(SESSION_RECORD))?;
    Ok(record)
}

/// A finished run's summary, for the caller to publish once its own
/// bookkeeping is done.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCompletion {
    pub timestamp_s: f64,
    pub summary: RunSummary,
}

impl RunCompletion {
    pub fn publish(self, bus: &EventBus) -> SessionEvent {
        bus.emit(self.timestamp_s, EventKind::RunSummary(self.summary))
    }
}

/// Executes run `run_index` of `plan`, appends it to `record` and rewrites
/// the session record. An abort marks the run and the record as aborted.
#[allow(clippy::too_many_arguments)]
pub fn run_plan_run(
    plan: &SessionPlan,
    run_index: usize,
    decoder: Option<&TrainedDecoderFile>,
    subject: &mut dyn SubjectSource,
    clock: &mut dyn Clock,
    control: &SessionControl,
    bus: &EventBus,
    options: &SessionOptions,
    record: &mut SessionRecord,
) -> Result<RunCompletion, SessionError> {
    let run = plan.runs.get(run_index).ok_or_else(|| {
        SessionError::Protocol(ProtocolError::InvalidPlan(format!("plan has no run {}", run_index + 1)))
    })?;
    std::fs::create_dir_all(&options.out_dir).map_err(io_err(&options.out_dir))?;
    let fs = subject.sample_rate_hz();
    let names = subject.channel_names();
    let decision = control.decision_override().unwrap_or(plan.decision);
    let t0 = clock.now_s();
    let run_type = run.run_type();
    let ctx = RunContext {
        run_index,
        run_type,
        t0,
        bus,
    };
    subject.begin_run(run_index)?;
    let start_time = options.start_time + TimeDelta::nanoseconds((t0 * 1e9).round() as i64);
    let extractor = match (run_type, decoder) {
        (RunType::Offline, _) | (_, None) => None,
        (_, Some(d)) => Some(OnlineFeatureExtractor::new(d)?),
    };
    let mut acq = Acquisition {
        subject,
        recording: Recording::empty(fs, names, start_time),
        extractor,
        sample_rate_hz: fs,
    };
    control.close_rating();
    let outcome = execute_run(plan, run, &decision, decoder, clock, &ctx, &mut acq, control, options)?;
    let stem = format!("run{:02}", run_index + 1);
    let run_id = format!("{}-{stem}", plan.session_id);
    let rec_name = format!("{stem}.vbci");
    let manifest_name = format!("{stem}.json");
    dataset::write_recording(&acq.recording, &options.out_dir.join(&rec_name))?;
    let mut manifest = RunManifest::new(&run_id, &rec_name, outcome.events.clone());
    manifest.aborted = outcome.aborted;
    if run_type != RunType::Offline {
        manifest.decision = Some(decision);
    }
    manifest.validate()?;
    dataset::write_json(&manifest, &options.out_dir.join(&manifest_name))?;

    let ratings = control.ratings();
    let mut trials = outcome.trials;
    for t in trials.iter_mut() {
        t.rating = ratings
            .iter()
            .rev()
            .find(|r| r.run_index == run_index && r.trial_index == t.trial_index)
            .cloned();
    }
    let mut run_record = RunRecord {
        run_index,
        run_id: run_id.clone(),
        run_type,
        manifest: manifest_name,
        trials,
        aborted: outcome.aborted,
        metrics: None,
        tree_path: outcome.tree_path,
    };
    let traces = scored_traces(&run_record);
    if run_type != RunType::Offline && !traces.is_empty() {
        run_record.metrics = Some(metrics::evaluate_trials(
            &traces,
            METRIC_THRESHOLD,
            options.chance_permutations,
            derive_seed(options.seed, run_index as u64, 1),
        )?);
    }
    let summary = RunSummary {
        run_index,
        run_id,
        run_type,
        completed_trials: run_record.trials.len(),
        aborted: outcome.aborted,
        metrics: run_record.metrics.clone(),
    };
    record.runs.retain(|r| r.run_index != run_index);
    record.runs.push(run_record);
    record.runs.sort_by_key(|r| r.run_index);
    if outcome.aborted {
        record.aborted = true;
    }
    dataset::write_json(&*record, &options.out_dir.join(SESSION_RECORD))?;
    Ok(RunCompletion {
        timestamp_s: t0 + outcome.end_rel,
        summary,
    })
}

/// Reads recorded samples back for a replayed decoding loop.
struct RecordedPosteriors<'a> {
    recording: &'a Recording,
    extractor: &'a mut OnlineFeatureExtractor,
    decoder: &'a TrainedDecoderFile,
    onset_s: f64,
}

fn feed_to(extractor: &mut OnlineFeatureExtractor, recording: &Recording, t_s: f64) -> Result<(), DecodeError> {
    let target = dataset_samples(t_s, recording.sample_rate_hz);
    let have = extractor.samples_seen();
    if target > recording.n_samples() {
        return Err(DecodeError::StreamEnded);
    }
    if target > have {
        let block: Vec<Vec<f32>> = recording.samples.iter().map(|c| c[have..target].to_vec()).collect();
        extractor.push(&block)?;
    }
    Ok(())
}

impl PosteriorSource for RecordedPosteriors<'_> {
    fn next_posterior(&mut self, elapsed_s: f64) -> Result<Option<f64>, DecodeError> {
        match feed_to(self.extractor, self.recording, self.onset_s + elapsed_s) {
            Err(DecodeError::StreamEnded) => return Ok(None),
            other => other?,
        }
        online::posterior(self.decoder, &self.extractor.current_frame()?).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayedTrial {
    pub run_index: usize,
    pub trial_index: usize,
    pub decoding: TrialDecoding,
}

/// Recomputes every online decision of a run from its recording.
pub fn replay_run(
    run_index: usize,
    run: &LoadedRun,
    decoder: &TrainedDecoderFile,
) -> Result<Vec<ReplayedTrial>, SessionError> {
    if run.manifest.trials.iter().all(|t| t.run_type == RunType::Offline) {
        return Ok(Vec::new());
    }
    let config = run
        .manifest
        .decision
        .ok_or_else(|| DatasetError::InvalidManifest(format!("{} has no decision thresholds", run.manifest.run_id)))?;
    let mut extractor = OnlineFeatureExtractor::new(decoder)?;
    let mut out = Vec::new();
    let flag = AtomicBool::new(false);
    for trial in &run.manifest.trials {
        feed_to(&mut extractor, &run.recording, trial.feedback_onset_s)?;
        extractor.capture_baseline();
        let mut source = RecordedPosteriors {
            recording: &run.recording,
            extractor: &mut extractor,
            decoder,
            onset_s: trial.feedback_onset_s,
        };
        let decoding = online::run_trial_decoding(
            &mut source,
            &config,
            decoder.preprocessing.window_s,
            &mut VirtualClock::new(),
            0.0,
            &flag,
            |_| {},
        )?;
        out.push(ReplayedTrial {
            run_index,
            trial_index: trial.trial_index,
            decoding,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionComparison {
    pub run_index: usize,
    pub trial_index: usize,
    pub logged: Option<Decision>,
    pub replayed: Decision,
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub comparisons: Vec<DecisionComparison>,
    pub logged_decisions: usize,
    /// Logged and replayed decision sequences serialize to the same bytes.
    pub identical: bool,
}

/// Logged decisions in log order.
pub fn logged_decisions(events: &[SessionEvent]) -> Vec<(usize, usize, Decision)> {
    events
        .iter()
        .filter_map(|e| match &e.event {
            EventKind::Decision(d) => Some((
                d.run_index,
                d.trial_index,
                Decision {
                    outcome: d.outcome,
                    decision_time_s: d.decision_time_s,
                },
            )),
            _ => None,
        })
        .collect()
}

/// Replays a session directory with `decoder` and compares the decisions
/// with those in its event log.
pub fn replay_session(session_dir: &Path, decoder: &TrainedDecoderFile) -> Result<ReplayReport, SessionError> {
    let (header, events) = read_event_log(&session_dir.join(EVENT_LOG))?;
    let record: SessionRecord = dataset::read_json(&session_dir.join(SESSION_RECORD))?;
    if record.schema_version != SCHEMA_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: record.schema_version,
            expected: SCHEMA_VERSION,
        }
        .into());
    }
    let logged = logged_decisions(&events);
    let by_key: BTreeMap<(usize, usize), Decision> = logged.iter().map(|&(r, t, d)| ((r, t), d)).collect();
    let mut replayed = Vec::new();
    for run in &record.runs {
        let loaded = dataset::load_run(&session_dir.join(&run.manifest))?;
        replayed.extend(replay_run(run.run_index, &loaded, decoder)?);
    }
    let comparisons: Vec<DecisionComparison> = replayed
        .iter()
        .map(|r| {
            let logged = by_key.get(&(r.run_index, r.trial_index)).copied();
            DecisionComparison {
                run_index: r.run_index,
                trial_index: r.trial_index,
                identical: logged.is_some_and(|l| decision_bytes(&l) == decision_bytes(&r.decoding.decision)),
                logged,
                replayed: r.decoding.decision,
            }
        })
        .collect();
    let logged_seq: Vec<Decision> = logged.iter().map(|x| x.2).collect();
    let replayed_seq: Vec<Decision> = replayed.iter().map(|r| r.decoding.decision).collect();
    let identical = serde_json::to_vec(&logged_seq).ok() == serde_json::to_vec(&replayed_seq).ok();
    Ok(ReplayReport {
        session_id: header.session_id,
        logged_decisions: logged.len(),
        comparisons,
        identical,
    })
}

fn decision_bytes(d: &Decision) -> Vec<u8> {
    serde_json::to_vec(d).expect("decisions serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_index: usize,
    pub run_type: RunType,
    pub n_decoded: usize,
    pub n_scored: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RunMetrics>,
    pub decisions: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class: Option<Class>,
    pub outcome: Outcome,
    pub decision_time_s: f64,
    pub bar_dynamics: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub runs: Vec<RunReport>,
    /// Kappa over every scored trial of the session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_chance_kappa: Option<f64>,
}

#[derive(Default)]
struct TrialAccumulator {
    run_type: Option<RunType>,
    truth: Option<Class>,
    points: Vec<TracePoint>,
    decision: Option<Decision>,
    rating: Option<(Outcome, RatingVerdict)>,
}

/// Rebuilds per-run metrics from an event log alone.
pub fn evaluate_log(
    header: &LogHeader,
    events: &[SessionEvent],
    n_perm: usize,
    seed: u64,
) -> Result<SessionReport, SessionError> {
    let mut trials: BTreeMap<(usize, usize), TrialAccumulator> = BTreeMap::new();
    for e in events {
        match &e.event {
            EventKind::PhaseChange(p) => {
                trials.entry((p.run_index, p.trial_index)).or_default().run_type = Some(p.run_type);
            }
            EventKind::QuestionShown(q) => {
                trials.entry((q.run_index, q.trial_index)).or_default().truth = q.expected_answer.map(Answer::class);
            }
            EventKind::Evidence(ev) => {
                trials
                    .entry((ev.run_index, ev.trial_index))
                    .or_default()
                    .points
                    .push(TracePoint {
                        t: ev.t,
                        prob: ev.prob_modulated,
                    });
            }
            EventKind::Decision(d) => {
                trials.entry((d.run_index, d.trial_index)).or_default().decision = Some(Decision {
                    outcome: d.outcome,
                    decision_time_s: d.decision_time_s,
                });
            }
            EventKind::RatingRecorded(r) => {
                trials.entry((r.run_index, r.trial_index)).or_default().rating = Some((r.decided, r.verdict));
            }
            _ => {}
        }
    }
    let mut runs: BTreeMap<usize, (RunType, Vec<TrialTrace>, Vec<TrialSummary>)> = BTreeMap::new();
    for ((run_index, trial_index), acc) in trials {
        let Some(decision) = acc.decision else { continue };
        let run_type = acc.run_type.unwrap_or(RunType::StandardOnline);
        let truth = acc.truth.or_else(|| {
            let (decided, verdict) = acc.rating?;
            let c = decided.class()?;
            Some(if verdict == RatingVerdict::Correct {
                c
            } else {
                c.opposite()
            })
        });
        let entry = runs
            .entry(run_index)
            .or_insert_with(|| (run_type, Vec::new(), Vec::new()));
        let trace = TrialTrace {
            trial_id: trial_index,
            true_class: truth.unwrap_or(Class::Baseline),
            points: acc.points,
            outcome: Some(decision.outcome),
        };
        entry.2.push(TrialSummary {
            trial_index,
            true_class: truth,
            outcome: decision.outcome,
            decision_time_s: decision.decision_time_s,
            bar_dynamics: if truth.is_some() {
                metrics::bar_dynamics(&trace).unwrap_or(0.0)
            } else {
                f64::NAN
            },
            latency_s: truth.and_then(|_| metrics::latency_to_correct_hit(&trace, METRIC_THRESHOLD)),
        });
        if truth.is_some() {
            entry.1.push(trace);
        }
    }
    let mut report = SessionReport {
        session_id: header.session_id.clone(),
        runs: Vec::new(),
        session_kappa: None,
        session_chance_kappa: None,
    };
    let mut all = Vec::new();
    for (run_index, (run_type, traces, decisions)) in runs {
        let m = if traces.is_empty() {
            None
        } else {
            Some(metrics::evaluate_trials(
                &traces,
                METRIC_THRESHOLD,
                n_perm,
                derive_seed(seed, run_index as u64, 1),
            )?)
        };
        report.runs.push(RunReport {
            run_index,
            run_type,
            n_decoded: decisions.len(),
            n_scored: traces.len(),
            metrics: m,
            decisions,
        });
        all.extend(traces);
    }
    if !all.is_empty() {
        let (pred, truth) = prediction_pairs(&all);
        report.session_kappa = Some(metrics::cohen_kappa(&pred, &truth)?.kappa);
        report.session_chance_kappa = Some(metrics::chance_kappa_of_predictions(
            &pred,
            &truth,
            n_perm,
            derive_seed(seed, u64::MAX, 1),
        )?);
    }
    Ok(report)
}

/// Predicted and true labels, a timeout being its own category.
pub fn prediction_pairs(traces: &[TrialTrace]) -> (Vec<Option<Class>>, Vec<Option<Class>>) {
    traces
        .iter()
        .map(|t| (t.outcome.and_then(Outcome::class), Some(t.true_class)))
        .unzip()
}

/// Assistive trees, plans and decoders referenced by the CLI and service
/// are plain JSON; these helpers only add the session-level checks.
pub fn load_tree(path: &Path) -> Result<AssistiveTree, SessionError> {
    Ok(AssistiveTree::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::PhaseTimings;

    /// Decoder over all 64 features that answers from Cz beta alone.
    pub(crate) fn cz_decoder(weight: f64) -> TrainedDecoderFile {
        let names = dataset::montage();
        let cz = dataset::montage_index("Cz").unwrap();
        TrainedDecoderFile {
            schema_version: SCHEMA_VERSION,
            channel_names: names,
            sample_rate_hz: 512.0,
            preprocessing: dataset::EpochParams::standard(512.0),
            selected_features: vec![
                dataset::FeatureIndex {
                    channel: cz,
                    band: crate::signal::Band::Beta,
                },
                dataset::FeatureIndex {
                    channel: 0,
                    band: crate::signal::Band::Alpha,
                },
                dataset::FeatureIndex {
                    channel: 1,
                    band: crate::signal::Band::Alpha,
                },
                dataset::FeatureIndex {
                    channel: 2,
                    band: crate::signal::Band::Alpha,
                },
            ],
            feature_mean: vec![2.0, 1.0, 1.0, 1.0],
            feature_scale: vec![1.0; 4],
            svm_weights: vec![weight, 0.0, 0.0, 0.0],
            svm_bias: 0.0,
            regularization_c: 1.0,
            calibration_a: -3.0,
            calibration_b: 0.0,
            seed: 0,
        }
    }

    fn epoch() -> DateTime<Utc> {
        DateTime::from_timestamp(0, 0).unwrap()
    }

    #[test]
    fn events_roundtrip_through_json() {
        let ev = SessionEvent {
            seq: 3,
            timestamp_s: 1.5,
            event: EventKind::Evidence(EvidenceUpdate {
                run_index: 0,
                trial_index: 1,
                t: 2.0,
                prob_modulated: 0.525,
            }),
        };
        let json = serde_json::to_string(&ev).unwrap();
        assert!(json.contains("\"kind\":\"Evidence\""), "{json}");
        assert!(json.contains("\"payload\":{"), "{json}");
        assert_eq!(serde_json::from_str::<SessionEvent>(&json).unwrap(), ev);
    }

    #[test]
    fn bus_numbers_and_clamps() {
        let bus = EventBus::new();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        bus.subscribe(move |e| s.lock().unwrap().push(e.seq));
        let err = |m: &str| {
            EventKind::Error(ErrorEvent {
                message: m.into(),
                command: None,
            })
        };
        bus.emit(5.0, err("a"));
        let late = bus.emit(3.0, err("b"));
        assert_eq!(late.timestamp_s, 5.0);
        assert_eq!(*seen.lock().unwrap(), vec![0, 1]);
        let past = bus.subscribe_from(1, |_| true);
        assert_eq!(past.len(), 1);
        assert_eq!(past[0].seq, 1);
    }

    #[test]
    fn subject_spec_parsing() {
        assert_eq!("stub".parse::<SubjectSpec>().unwrap(), SubjectSpec::Stub);
        assert_eq!(
            "replay:/tmp/s".parse::<SubjectSpec>().unwrap(),
            SubjectSpec::Replay("/tmp/s".into())
        );
        assert_eq!(
            "synthetic:p.json".parse::<SubjectSpec>().unwrap().to_string(),
            "synthetic:p.json"
        );
        assert!("live".parse::<SubjectSpec>().is_err());
        assert!("replay:".parse::<SubjectSpec>().is_err());
    }

    #[test]
    fn stub_subject_fails_on_run() {
        let dir = tempfile::tempdir().unwrap();
        let plan = SessionPlan::offline_session("s", 1, 4, 0).unwrap();
        let err = run_session(
            &plan,
            None,
            &mut StubSubject::default(),
            &mut VirtualClock::new(),
            &SessionControl::new(),
            &EventBus::new(),
            &SessionOptions::new(dir.path()),
        )
        .unwrap_err();
        assert!(matches!(err, SessionError::Source(_)));
    }

    #[test]
    fn offline_run_records_balanced_trials() {
        let dir = tempfile::tempdir().unwrap();
        let plan = SessionPlan::offline_session("s", 1, 14, 3).unwrap();
        let bus = EventBus::new();
        let mut subject = SyntheticSubject::new(SubjectProfile::strong(1)).unwrap();
        let record = run_session(
            &plan,
            None,
            &mut subject,
            &mut VirtualClock::new(),
            &SessionControl::new(),
            &bus,
            &SessionOptions::new(dir.path()),
        )
        .unwrap();
        let run = &record.runs[0];
        assert_eq!(run.trials.len(), 14);
        let m = run
            .trials
            .iter()
            .filter(|t| t.true_class == TrueClass::Modulated)
            .count();
        assert_eq!(m, 7);
        let loaded = dataset::load_run(&dir.path().join(&run.manifest)).unwrap();
        assert_eq!(loaded.recording.duration_s(), 14.0 * 25.0);
        assert_eq!(loaded.manifest.trials[1].feedback_onset_s, 25.0 + 15.0);
        let data = dataset::epoch_trials(
            &loaded.recording,
            &loaded.manifest,
            &dataset::EpochParams::standard(512.0),
        )
        .unwrap();
        assert_eq!(data.len(), 14 * 9);
        let seqs: Vec<u64> = bus.history().iter().map(|e| e.seq).collect();
        assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
    }

    fn online_plan(n: usize) -> SessionPlan {
        SessionPlan::online_session("on", 1, n, 5).unwrap()
    }

    #[test]
    fn online_phase_onsets_follow_the_timeline() {
        let dir = tempfile::tempdir().unwrap();
        let plan = online_plan(6);
        let bus = EventBus::new();
        let mut subject = SyntheticSubject::new(SubjectProfile::strong(2)).unwrap();
        let decoder = cz_decoder(1.0);
        let record = run_session(
            &plan,
            Some(&decoder),
            &mut subject,
            &mut VirtualClock::new(),
            &SessionControl::new(),
            &bus,
            &SessionOptions::new(dir.path()),
        )
        .unwrap();
        let events = bus.history();
        let first_trial: Vec<(TrialPhase, f64)> = events
            .iter()
            .filter_map(|e| match &e.event {
                EventKind::PhaseChange(p) if p.trial_index == 0 => Some((p.phase, e.timestamp_s)),
                _ => None,
            })
            .collect();
        let RunPlan::StandardOnline { questions } = &plan.runs[0] else {
            unreachable!()
        };
        let timeline =
            protocol::build_online_timeline(0, &questions[0], &PhaseTimings::default(), &plan.decision).unwrap();
        for (entry, (phase, ts)) in timeline.entries.iter().zip(&first_trial) {
            assert_eq!(entry.phase, *phase);
            assert_eq!(entry.onset_s, *ts);
        }
        assert_eq!(first_trial.last().unwrap().0, TrialPhase::Ended);
        // Every decision follows at least one evidence update of its trial.
        let mut evidence_seen = BTreeMap::new();
        for e in &events {
            match &e.event {
                EventKind::Evidence(x) => {
                    evidence_seen.insert((x.run_index, x.trial_index), true);
                }
                EventKind::Decision(d) => assert!(evidence_seen.contains_key(&(d.run_index, d.trial_index))),
                _ => {}
            }
        }
        assert_eq!(record.decisions().len(), 6);
        assert!(events.windows(2).all(|w| w[1].timestamp_s >= w[0].timestamp_s));
    }

    #[test]
    fn evidence_arrives_once_per_second() {
        let dir = tempfile::tempdir().unwrap();
        let bus = EventBus::new();
        let mut subject = SyntheticSubject::new(SubjectProfile::null(2)).unwrap();
        // A zero-weight decoder always outputs 0.5 and so times out.
        let decoder = cz_decoder(0.0);
        let record = run_session(
            &online_plan(6),
            Some(&decoder),
            &mut subject,
            &mut VirtualClock::new(),
            &SessionControl::new(),
            &bus,
            &SessionOptions::new(dir.path()),
        )
        .unwrap();
        for t in &record.runs[0].trials {
            let d = t.decoding.as_ref().unwrap();
            assert_eq!(d.decision.outcome, Outcome::Timeout);
            assert_eq!(d.decision.decision_time_s, 20.0);
            assert_eq!(d.trace.len(), 19);
        }
        let stamps: Vec<f64> = bus
            .history()
            .iter()
            .filter(|e| matches!(&e.event, EventKind::Evidence(x) if x.trial_index == 0))
            .map(|e| e.timestamp_s)
            .collect();
        assert!(stamps.windows(2).all(|w| w[1] - w[0] == 1.0));
        assert_eq!(stamps[0], 23.5 + 2.0);
    }

    #[test]
    fn abort_keeps_completed_trials() {
        let dir = tempfile::tempdir().unwrap();
        let plan = SessionPlan::offline_session("s", 2, 14, 3).unwrap();
        let bus = EventBus::new();
        let control = Arc::new(SessionControl::new());
        let c = control.clone();
        bus.subscribe(move |e| {
            if let EventKind::PhaseChange(p) = &e.event {
                if p.phase == TrialPhase::Ended && p.trial_index == 2 {
                    c.request_abort();
                }
            }
        });
        let mut subject = SyntheticSubject::new(SubjectProfile::strong(1)).unwrap();
        let record = run_session(
            &plan,
            None,
            &mut subject,
            &mut VirtualClock::new(),
            &control,
            &bus,
            &SessionOptions::new(dir.path()),
        )
        .unwrap();
        assert!(record.aborted);
        assert_eq!(record.runs.len(), 1);
        assert_eq!(record.runs[0].trials.len(), 3);
        let manifest: RunManifest = dataset::read_json(&dir.path().join("run01.json")).unwrap();
        assert!(manifest.aborted);
        assert_eq!(manifest.trials.len(), 3);
        let summary = bus.history().into_iter().rev().find_map(|e| match e.event {
            EventKind::RunSummary(s) => Some(s),
            _ => None,
        });
        assert!(summary.unwrap().aborted);
    }

    #[test]
    fn rating_requires_a_pending_trial() {
        let control = SessionControl::new();
        let bus = EventBus::new();
        assert!(matches!(
            control.submit_rating(&bus, 4, None),
            Err(SessionError::RatingRejected(_))
        ));
        control.open_rating(PendingRating {
            run_index: 0,
            trial_index: 2,
            decided: Outcome::No,
        });
        assert!(control.submit_rating(&bus, 9, None).is_err());
        let r = control.submit_rating(&bus, 4, None).unwrap();
        assert_eq!(r.verdict, RatingVerdict::Correct);
        assert_eq!(r.inferred_class(), Some(Class::Baseline));
        assert!(control.pending_rating().is_none());
        let last = bus.history().pop().unwrap();
        assert!(matches!(last.event, EventKind::RatingRecorded(ref x) if x.score == 4));
    }

    #[test]
    fn corrupted_log_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(EVENT_LOG);
        let bus = EventBus::new();
        bus.open_log(
            &path,
            &LogHeader {
                log_type: LOG_TYPE.into(),
                schema_version: SCHEMA_VERSION,
                session_id: "s".into(),
                created: epoch(),
            },
        )
        .unwrap();
        for i in 0..3 {
            bus.emit(
                i as f64,
                EventKind::Error(ErrorEvent {
                    message: "x".into(),
                    command: None,
                }),
            );
        }
        bus.close_log();
        let (_, events) = read_event_log(&path).unwrap();
        assert_eq!(events, bus.history());

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, &text).unwrap();
        assert!(matches!(
            read_event_log(&path),
            Err(SessionError::FormatError { line: 5, .. })
        ));

        let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            read_event_log(&path),
            Err(SessionError::VersionMismatch { line: 1, found: 9, .. })
        ));
    }

    #[test]
    fn assistive_path_follows_scheduled_answers() {
        let dir = tempfile::tempdir().unwrap();
        let tree = AssistiveTree::example();
        let answers = vec![Answer::No, Answer::Yes, Answer::No, Answer::Yes, Answer::Yes];
        let plan = SessionPlan::new(
            "a",
            vec![RunPlan::AssistiveOnline {
                tree: tree.clone(),
                intended_answers: answers.clone(),
            }],
        );
        let bus = EventBus::new();
        let control = SessionControl::new();
        let mut options = SessionOptions::new(dir.path());
        options.auto_rate = true;
        options.chance_permutations = 200;
        let mut subject = SyntheticSubject::new(SubjectProfile::strong(4)).unwrap();
        let record = run_session(
            &plan,
            Some(&cz_decoder(1.0)),
            &mut subject,
            &mut VirtualClock::new(),
            &control,
            &bus,
            &options,
        )
        .unwrap();
        let run = &record.runs[0];
        let expected = tree.walk(&answers).unwrap();
        assert_eq!(run.tree_path, expected);
        assert_eq!(run.trials.len(), expected.len());
        assert!(run.tree_path.len() <= tree.depth());
        for t in &run.trials {
            assert_eq!(t.true_class, TrueClass::Unknown);
            let r = t.rating.as_ref().unwrap();
            assert_eq!(r.verdict, RatingVerdict::Correct);
            assert_eq!(r.inferred_class(), t.intended);
        }
        let moves = bus
            .history()
            .iter()
            .filter(|e| matches!(e.event, EventKind::TreeMove(_)))
            .count();
        assert_eq!(moves, expected.len());
    }

    #[test]
    fn replay_reproduces_logged_decisions() {
        let dir = tempfile::tempdir().unwrap();
        let plan = SessionPlan::online_session("r", 2, 6, 9).unwrap();
        let bus = EventBus::new();
        open_session_log(&bus, dir.path(), &plan.session_id, epoch()).unwrap();
        let mut subject = SyntheticSubject::new(SubjectProfile::strong(6)).unwrap();
        let decoder = cz_decoder(1.0);
        let mut options = SessionOptions::new(dir.path());
        options.chance_permutations = 100;
        let record = run_session(
            &plan,
            Some(&decoder),
            &mut subject,
            &mut VirtualClock::new(),
            &SessionControl::new(),
            &bus,
            &options,
        )
        .unwrap();
        bus.close_log();
        let report = replay_session(dir.path(), &decoder).unwrap();
        assert!(report.identical);
        assert_eq!(report.logged_decisions, 12);
        assert!(report.comparisons.iter().all(|c| c.identical));
        let replayed: Vec<Decision> = report.comparisons.iter().map(|c| c.replayed).collect();
        let recorded: Vec<Decision> = record.decisions().into_iter().map(|d| d.2).collect();
        assert_eq!(replayed, recorded);

        let other = replay_session(dir.path(), &cz_decoder(-1.0)).unwrap();
        assert!(!other.identical);
        assert_eq!(other.comparisons.len(), 12);

        let via_source = {
            let bus = EventBus::new();
            let mut subject = ReplaySubject::open(dir.path()).unwrap();
            let out = tempfile::tempdir().unwrap();
            run_session(
                &plan,
                Some(&decoder),
                &mut subject,
                &mut VirtualClock::new(),
                &SessionControl::new(),
                &bus,
                &SessionOptions::new(out.path()),
            )
            .unwrap()
        };
        assert_eq!(via_source.decisions(), record.decisions());
    }
}
