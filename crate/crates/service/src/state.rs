use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use vbci_core::clock::{make_clock, Clock, ClockMode};
use vbci_core::dataset::TrainedDecoderFile;
use vbci_core::protocol::SessionPlan;
use vbci_core::session::{
    check_decoder, open_session_log, run_plan_run, ErrorEvent, EventBus, EventKind, PendingRating, SessionControl,
    SessionError, SessionOptions, SessionRecord, SubjectSource, SubjectSpec,
};

use crate::{thresholds, OperatorCommand, ServiceConfig, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandReply {
    pub ok: bool,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_index: Option<usize>,
}

impl CommandReply {
    fn ok(command: &str, message: impl Into<String>) -> Self {
        Self {
            ok: true,
            command: command.into(),
            message: Some(message.into()),
            error: None,
            session_id: None,
            run_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub clock: ClockMode,
    pub subject: String,
    pub decoder_loaded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_dir: Option<PathBuf>,
    pub run_count: usize,
    pub completed_runs: Vec<usize>,
    pub active_run: Option<usize>,
    pub pending_rating: Option<PendingRating>,
    pub next_seq: u64,
}

struct Session {
    plan: SessionPlan,
    dir: PathBuf,
    record: SessionRecord,
}

struct Inner {
    subject_spec: SubjectSpec,
    /// `None` while a run thread holds it.
    subject: Option<Box<dyn SubjectSource>>,
    clock: Option<Box<dyn Clock>>,
    session: Option<Session>,
    active_run: Option<usize>,
    worker: Option<JoinHandle<()>>,
}

struct Shared {
    config: ServiceConfig,
    bus: EventBus,
    control: SessionControl,
    decoder: Option<TrainedDecoderFile>,
    inner: Mutex<Inner>,
    shutting_down: AtomicBool,
}

/// Service state shared by the HTTP handlers and the run thread.
#[derive(Clone)]
pub struct ServiceState {
    shared: Arc<Shared>,
}

/// A rejected command: reported to the caller and as an `Error` event.
struct Rejection(String);

impl<E: std::fmt::Display> From<E> for Rejection {
    fn from(e: E) -> Self {
        Rejection(e.to_string())
    }
}

impl ServiceState {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(&config.data_dir).map_err(|source| ServiceError::DataDir {
            path: config.data_dir.clone(),
            source,
        })?;
        let decoder = match &config.decoder {
            Some(path) => Some(
                TrainedDecoderFile::load(path).map_err(|source| ServiceError::DecoderLoadError {
                    path: path.clone(),
                    source,
                })?,
            ),
            None => None,
        };
        let subject = config.subject.open(Some(config.seed))?;
        Ok(Self {
            shared: Arc::new(Shared {
                bus: EventBus::new(),
                control: SessionControl::new(),
                decoder,
                inner: Mutex::new(Inner {
                    subject_spec: config.subject.clone(),
                    subject: Some(subject),
                    clock: Some(make_clock(config.clock)),
                    session: None,
                    active_run: None,
                    worker: None,
                }),
                shutting_down: AtomicBool::new(false),
                config,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.shared.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn bus(&self) -> &EventBus {
        &self.shared.bus
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.shared.config
    }

    pub fn status(&self) -> StatusReport {
        let inner = self.lock();
        let session = inner.session.as_ref();
        StatusReport {
            clock: self.shared.config.clock,
            subject: inner.subject_spec.to_string(),
            decoder_loaded: self.shared.decoder.is_some(),
            session_id: session.map(|s| s.plan.session_id.clone()),
            session_dir: session.map(|s| s.dir.clone()),
            run_count: session.map_or(0, |s| s.plan.runs.len()),
            completed_runs: session
                .map(|s| s.record.runs.iter().map(|r| r.run_index).collect())
                .unwrap_or_default(),
            active_run: inner.active_run,
            pending_rating: self.shared.control.pending_rating(),
            next_seq: self.shared.bus.next_seq(),
        }
    }

    pub fn is_running(&self) -> bool {
        self.lock().active_run.is_some()
    }

    /// Applies one command. Rejections are also published as `Error` events.
    pub fn apply(&self, command: OperatorCommand) -> CommandReply {
        let name = command.name();
        match self.dispatch(command) {
            Ok(reply) => reply,
            Err(Rejection(message)) => {
                self.shared.bus.emit_now(EventKind::Error(ErrorEvent {
                    message: message.clone(),
                    command: Some(name.into()),
                }));
                CommandReply {
                    ok: false,
                    command: name.into(),
                    message: None,
                    error: Some(message),
                    session_id: None,
                    run_index: None,
                }
            }
        }
    }

    /// Reports a command body that could not be parsed.
    pub fn reject_malformed(&self, message: String) -> CommandReply {
        self.shared.bus.emit_now(EventKind::Error(ErrorEvent {
            message: message.clone(),
            command: None,
        }));
        CommandReply {
            ok: false,
            command: "unknown".into(),
            message: None,
            error: Some(message),
            session_id: None,
            run_index: None,
        }
    }

    fn dispatch(&self, command: OperatorCommand) -> Result<CommandReply, Rejection> {
        let name = command.name();
        match command {
            OperatorCommand::LoadPlan { plan, path } => self.load_plan(plan, path),
            OperatorCommand::StartRun { run_index } => self.start_run(run_index),
            OperatorCommand::Abort => {
                let inner = self.lock();
                let Some(run) = inner.active_run else {
                    return Err(Rejection("no run is active".into()));
                };
                self.shared.control.request_abort();
                Ok(CommandReply {
                    run_index: Some(run),
                    ..CommandReply::ok(name, "abort requested")
                })
            }
            OperatorCommand::SubmitRating { score, note } => {
                let r = self.shared.control.submit_rating(&self.shared.bus, score, note)?;
                Ok(CommandReply {
                    run_index: Some(r.run_index),
                    ..CommandReply::ok(name, format!("rating {score} recorded as {:?}", r.verdict))
                })
            }
            OperatorCommand::SetThresholds {
                yes_threshold,
                no_threshold,
            } => {
                let base = self
                    .shared
                    .control
                    .decision_override()
                    .or_else(|| self.lock().session.as_ref().map(|s| s.plan.decision))
                    .unwrap_or_default();
                self.shared
                    .control
                    .set_decision(thresholds(base, yes_threshold, no_threshold))?;
                Ok(CommandReply::ok(name, "thresholds apply from the next run"))
            }
            OperatorCommand::SelectSubjectSource { subject } => {
                let mut inner = self.lock();
                if inner.active_run.is_some() {
                    return Err(Rejection("cannot change the subject during a run".into()));
                }
                let source = subject.open(Some(self.shared.config.seed))?;
                inner.subject = Some(source);
                inner.subject_spec = subject.clone();
                Ok(CommandReply::ok(name, format!("subject is now {subject}")))
            }
        }
    }

    fn load_plan(&self, plan: Option<SessionPlan>, path: Option<PathBuf>) -> Result<CommandReply, Rejection> {
        let plan = match (plan, path) {
            (Some(p), None) => p,
            (None, Some(path)) => SessionPlan::load(&path)?,
            _ => return Err(Rejection("LoadPlan needs exactly one of plan or path".into())),
        };
        plan.validate()?;
        let mut inner = self.lock();
        if inner.active_run.is_some() {
            return Err(Rejection("a run is active".into()));
        }
        // A fresh subject per session, so every session starts from its seed.
        let subject = inner.subject_spec.open(Some(self.shared.config.seed))?;
        check_decoder(&plan, self.shared.decoder.as_ref(), subject.as_ref())?;
        if !valid_id(&plan.session_id) {
            return Err(Rejection(format!(
                "session id {:?} must be letters, digits, '-' or '_'",
                plan.session_id
            )));
        }
        let dir = unused_dir(&self.shared.config.data_dir, &plan.session_id);
        open_session_log(&self.shared.bus, &dir, &plan.session_id, Utc::now())?;
        let record = SessionRecord::new(&plan, subject.as_ref());
        inner.subject = Some(subject);
        let session_id = plan.session_id.clone();
        inner.session = Some(Session { plan, dir, record });
        Ok(CommandReply {
            session_id: Some(session_id),
            ..CommandReply::ok("LoadPlan", "plan loaded")
        })
    }

    fn start_run(&self, requested: Option<usize>) -> Result<CommandReply, Rejection> {
        let mut inner = self.lock();
        if inner.active_run.is_some() {
            return Err(Rejection(SessionError::RunActive.to_string()));
        }
        let Some(session) = inner.session.as_ref() else {
            return Err(Rejection("no plan is loaded".into()));
        };
        let done: Vec<usize> = session.record.runs.iter().map(|r| r.run_index).collect();
        let run_index = match requested {
            Some(i) if i >= session.plan.runs.len() => {
                return Err(Rejection(format!("plan has no run {i}")));
            }
            Some(i) => i,
            None => (0..session.plan.runs.len())
                .find(|i| !done.contains(i))
                .ok_or_else(|| Rejection("every run of the plan has been executed".into()))?,
        };
        let plan = session.plan.clone();
        let mut record = session.record.clone();
        let dir = session.dir.clone();
        let subject = inner.subject.take();
        let clock = inner.clock.take();
        let (Some(mut subject), Some(mut clock)) = (subject, clock) else {
            return Err(Rejection("subject or clock unavailable".into()));
        };
        if let Err(e) = check_decoder(&plan, self.shared.decoder.as_ref(), subject.as_ref()) {
            inner.subject = Some(subject);
            inner.clock = Some(clock);
            return Err(e.into());
        }
        if let Some(handle) = inner.worker.take() {
            let _ = handle.join();
        }
        self.shared.control.clear_abort();
        inner.active_run = Some(run_index);
        let state = self.clone();
        let config = &self.shared.config;
        let mut options = SessionOptions::new(dir);
        options.seed = config.seed;
        options.chance_permutations = config.chance_permutations;
        options.auto_rate = config.auto_rate;
        let session_id = plan.session_id.clone();
        inner.worker = Some(std::thread::spawn(move || {
            let shared = &state.shared;
            let result = run_plan_run(
                &plan,
                run_index,
                shared.decoder.as_ref(),
                subject.as_mut(),
                clock.as_mut(),
                &shared.control,
                &shared.bus,
                &options,
                &mut record,
            );
            let mut inner = state.lock();
            if let Some(s) = inner.session.as_mut().filter(|s| s.plan.session_id == plan.session_id) {
                s.record = record;
            }
            inner.subject = Some(subject);
            inner.clock = Some(clock);
            inner.active_run = None;
            // Published under the lock: once a client sees it, the service is idle.
            match result {
                Ok(done) => {
                    done.publish(&shared.bus);
                }
                Err(e) => {
                    shared.bus.emit_now(EventKind::Error(ErrorEvent {
                        message: format!("run {} failed: {e}", run_index + 1),
                        command: Some("StartRun".into()),
                    }));
                }
            }
        }));
        Ok(CommandReply {
            session_id: Some(session_id),
            run_index: Some(run_index),
            ..CommandReply::ok("StartRun", "run started")
        })
    }

    /// Blocks until the active run, if any, has finished.
    pub fn wait_idle(&self) {
        let handle = self.lock().worker.take();
        if let Some(h) = handle {
            let _ = h.join();
        }
    }

    /// Aborts any active run and closes the log.
    pub fn shutdown(&self) {
        if self.shared.shutting_down.swap(true, Ordering::SeqCst) {
            return;
        }
        if self.is_running() {
            self.shared.control.request_abort();
        }
        self.wait_idle();
        self.shared.bus.clear_subscribers();
        self.shared.bus.close_log();
    }

    pub fn data_dir(&self) -> &Path {
        &self.shared.config.data_dir
    }
}

pub(crate) fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn unused_dir(root: &Path, id: &str) -> PathBuf {
    let first = root.join(id);
    if !first.exists() {
        return first;
    }
    (2..)
        .map(|n| root.join(format!("{id}-{n}")))
        .find(|p| !p.exists())
        .expect("some suffix is free")
}
