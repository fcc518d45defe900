//! Long-running session service.
//!
//! Operators drive a session through `POST /command`; every event of the
//! session goes to the event log and to the live streams (`GET /ws`,
//! `GET /events`). See `docs/protocol.md` for the wire format.

mod http;
mod state;

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vbci_core::clock::ClockMode;
use vbci_core::dataset::DatasetError;
use vbci_core::online::DecisionConfig;
use vbci_core::protocol::SessionPlan;
use vbci_core::session::{SessionError, SubjectSpec};

pub use http::router;
pub use state::{CommandReply, ServiceState, StatusReport};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot listen on {addr}: {source}")]
    PortUnavailable { addr: SocketAddr, source: std::io::Error },
    #[error("cannot load decoder {path}: {source}")]
    DecoderLoadError { path: PathBuf, source: DatasetError },
    #[error("cannot create data directory {path}: {source}")]
    DataDir { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("server failed: {0}")]
    Server(std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub host: IpAddr,
    /// 0 picks a free port.
    pub port: u16,
    pub data_dir: PathBuf,
    pub decoder: Option<PathBuf>,
    pub clock: ClockMode,
    pub subject: SubjectSpec,
    pub seed: u64,
    /// Permutations for the chance-level kappa in run summaries.
    pub chance_permutations: usize,
    /// Rate assistive decisions from the scripted answers instead of
    /// waiting for a caretaker.
    pub auto_rate: bool,
    /// Events buffered per stream client before it is disconnected.
    pub client_buffer: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>, subject: SubjectSpec) -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8750,
            data_dir: data_dir.into(),
            decoder: None,
            clock: ClockMode::Real,
            subject,
            seed: 0,
            chance_permutations: vbci_core::metrics::CHANCE_PERMUTATIONS,
            auto_rate: false,
            client_buffer: 4096,
        }
    }
}

/// Operator command, as sent to `POST /command`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum OperatorCommand {
    /// Loads a plan given inline or as a path on the service host, and
    /// opens a new session directory and log for it.
    LoadPlan {
        #[serde(default)]
        plan: Option<SessionPlan>,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    /// Starts run `run_index`, or the first run not yet executed.
    StartRun {
        #[serde(default)]
        run_index: Option<usize>,
    },
    Abort,
    SubmitRating {
        score: u8,
        #[serde(default)]
        note: Option<String>,
    },
    /// Takes effect at the start of the next run.
    SetThresholds {
        yes_threshold: f64,
        no_threshold: f64,
    },
    SelectSubjectSource {
        subject: SubjectSpec,
    },
}

impl OperatorCommand {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorCommand::LoadPlan { .. } => "LoadPlan",
            OperatorCommand::StartRun { .. } => "StartRun",
            OperatorCommand::Abort => "Abort",
            OperatorCommand::SubmitRating { .. } => "SubmitRating",
            OperatorCommand::SetThresholds { .. } => "SetThresholds",
            OperatorCommand::SelectSubjectSource { .. } => "SelectSubjectSource",
        }
    }
}

fn thresholds(base: DecisionConfig, yes: f64, no: f64) -> DecisionConfig {
    DecisionConfig {
        yes_threshold: yes,
        no_threshold: no,
        ..base
    }
}

/// A service bound to its socket.
pub struct Service {
    state: ServiceState,
    listener: tokio::net::TcpListener,
}

impl Service {
    /// Loads the decoder, opens the subject and binds the port.
    pub async fn bind(config: ServiceConfig) -> Result<Self, ServiceError> {
        let addr = SocketAddr::new(config.host, config.port);
        let state = ServiceState::new(config)?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| ServiceError::PortUnavailable { addr, source })?;
        Ok(Self { state, listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn state(&self) -> &ServiceState {
        &self.state
    }

    /// Serves until `shutdown` resolves. The active run is aborted and open
    /// event streams are closed before the server drains.
    pub async fn run_until(
        self,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> Result<(), ServiceError> {
        let app = router(self.state.clone());
        let state = self.state.clone();
        let drain = async move {
            shutdown.await;
            let _ = tokio::task::spawn_blocking(move || state.shutdown()).await;
        };
        let result = axum::serve(self.listener, app)
            .with_graceful_shutdown(drain)
            .await
            .map_err(ServiceError::Server);
        self.state.shutdown();
        result
    }
}

/// Runs the service until interrupted with Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let service = Service::bind(config).await?;
    tracing::info!("listening on http://{}", service.local_addr());
    service
        .run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
