use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vbci_core::clock::ClockMode;
use vbci_core::dataset::{BaselineWindow, EpochParams};
use vbci_core::metrics::CHANCE_PERMUTATIONS;
use vbci_core::protocol::PhaseTimings;
use vbci_core::session::SubjectSpec;
use vbci_core::signal::Band;
use vbci_core::training::CalibrationScores;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "vbci",
    version,
    about = "Auditory yes/no EEG BCI: simulate sessions, train decoders, replay, evaluate and serve"
)]
pub struct Cli {
    /// Seed for every random choice. Identical inputs and seed give identical outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    #[serde(flatten)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Run a session plan against a synthetic subject and write its recordings and log.
    Simulate(SimulateArgs),
    /// Train a decoder from offline runs.
    Train(TrainArgs),
    /// Recompute the decisions of a recorded session and compare them with its log.
    Replay(ReplayArgs),
    /// Per-run metrics from a session log.
    Evaluate(EvaluateArgs),
    /// Per-channel permutation test between classes, with multiple-comparison correction.
    Permtest(PermtestArgs),
    /// Per-channel class difference of normalized band power.
    Topo(TopoArgs),
    /// Run the session service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockArg {
    Real,
    Virtual,
}

impl From<ClockArg> for ClockMode {
    fn from(c: ClockArg) -> Self {
        match c {
            ClockArg::Real => ClockMode::Real,
            ClockArg::Virtual => ClockMode::Virtual,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Beta gain 2 at the motor channels, alpha gain 1.5 at Pz.
    Strong,
    /// No modulation at all.
    Null,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Output session directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Subject profile JSON. Its seed is replaced by --seed.
    #[arg(long, conflicts_with = "preset")]
    pub profile: Option<PathBuf>,
    /// Built-in profile used when no --profile is given.
    #[arg(long, value_enum, default_value_t = Preset::Strong)]
    pub preset: Preset,
    /// Session plan JSON. Without it a plan is built from the run counts below.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value = "sim")]
    pub session_id: String,
    #[arg(long, default_value_t = 3)]
    pub offline_runs: usize,
    #[arg(long, default_value_t = 16)]
    pub offline_trials: usize,
    #[arg(long, default_value_t = 0)]
    pub online_runs: usize,
    #[arg(long, default_value_t = 10)]
    pub online_trials: usize,
    /// Decoder file, required by online runs.
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClockArg::Virtual)]
    pub clock: ClockArg,
    #[arg(long)]
    pub yes_threshold: Option<f64>,
    #[arg(long)]
    pub no_threshold: Option<f64>,
    /// Rate assistive decisions from the scripted answers.
    #[arg(long)]
    pub auto_rate: bool,
    /// Label permutations for chance-level kappa.
    #[arg(long, default_value_t = CHANCE_PERMUTATIONS)]
    pub permutations: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineFrom {
    /// The seconds just before feedback onset.
    PreFeedback,
    /// The last seconds of the rest period.
    RestEnd,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BandEdges {
    pub low_hz: f64,
    pub high_hz: f64,
}

fn parse_band(s: &str) -> Result<BandEdges, String> {
    let (lo, hi) = s
        .split_once('-')
        .ok_or_else(|| format!("expected LOW-HIGH in Hz, got {s:?}"))?;
    let low_hz: f64 = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let high_hz: f64 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    if !(low_hz > 0.0 && high_hz > low_hz) {
        return Err(format!("band {s:?} must satisfy 0 < LOW < HIGH"));
    }
    Ok(BandEdges { low_hz, high_hz })
}

/// Feature extraction overrides.
#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    /// Band-power window length in seconds.
    #[arg(long)]
    pub window_s: Option<f64>,
    /// Step between windows in seconds.
    #[arg(long)]
    pub step_s: Option<f64>,
    /// Alpha pass band, e.g. 7-12.
    #[arg(long, value_parser = parse_band)]
    pub alpha_band: Option<BandEdges>,
    /// Beta pass band, e.g. 12-30.
    #[arg(long, value_parser = parse_band)]
    pub beta_band: Option<BandEdges>,
    #[arg(long, value_enum)]
    pub baseline_from: Option<BaselineFrom>,
    /// Baseline length in seconds.
    #[arg(long)]
    pub baseline_s: Option<f64>,
}

impl PreprocessArgs {
    pub fn apply(&self, params: &mut EpochParams) {
        if let Some(w) = self.window_s {
            params.window_s = w;
        }
        if let Some(s) = self.step_s {
            params.step_s = s;
        }
        if let Some(b) = self.alpha_band {
            params.alpha_filter.low_cut_hz = b.low_hz;
            params.alpha_filter.high_cut_hz = b.high_hz;
        }
        if let Some(b) = self.beta_band {
            params.beta_filter.low_cut_hz = b.low_hz;
            params.beta_filter.high_cut_hz = b.high_hz;
        }
        let current = match params.baseline {
            BaselineWindow::PreFeedback { duration_s } | BaselineWindow::RestEnd { duration_s, .. } => duration_s,
        };
        let duration_s = self.baseline_s.unwrap_or(current);
        params.baseline = match self.baseline_from {
            Some(BaselineFrom::RestEnd) => BaselineWindow::RestEnd {
                rest_duration_s: PhaseTimings::default().rest_s,
                duration_s,
            },
            Some(BaselineFrom::PreFeedback) => BaselineWindow::PreFeedback { duration_s },
            None => match params.baseline {
                BaselineWindow::PreFeedback { .. } => BaselineWindow::PreFeedback { duration_s },
                BaselineWindow::RestEnd { rest_duration_s, .. } => BaselineWindow::RestEnd {
                    rest_duration_s,
                    duration_s,
                },
            },
        };
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationArg {
    OutOfFold,
    Training,
}

impl From<CalibrationArg> for CalibrationScores {
    fn from(c: CalibrationArg) -> Self {
        match c {
            CalibrationArg::OutOfFold => CalibrationScores::OutOfFold,
            CalibrationArg::Training => CalibrationScores::Training,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset bundle files or session directories (their offline runs are used).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Decoder file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report to write. Also printed to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// SVM regularization.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = CalibrationArg::OutOfFold)]
    pub calibration: CalibrationArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub preprocess: PreprocessArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    /// Session directory.
    pub session: PathBuf,
    #[arg(long)]
    pub decoder: PathBuf,
    /// Write the comparison report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit with status 2 when the replayed decisions differ from the log.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Session directory or event log file.
    pub log: PathBuf,
    /// JSON report to write. Also printed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-run metrics table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Label permutations for chance-level kappa.
    #[arg(long, default_value_t = CHANCE_PERMUTATIONS)]
    pub permutations: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BandArg {
    Alpha,
    Beta,
    Both,
}

impl BandArg {
    pub fn bands(self) -> Vec<Band> {
        match self {
            BandArg::Alpha => vec![Band::Alpha],
            BandArg::Beta => vec![Band::Beta],
            BandArg::Both => Band::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleUnit {
    /// Shuffle trial labels; the frames of a trial move together.
    Trial,
    /// Shuffle the labels of individual frames.
    Frame,
}

#[derive(Debug, Args, Serialize)]
pub struct PermtestArgs {
    /// Dataset bundle files or session directories (all their runs are used).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = BandArg::Both)]
    pub band: BandArg,
    #[arg(long, default_value_t = 1000)]
    pub shuffles: usize,
    #[arg(long, value_enum, default_value_t = ShuffleUnit::Trial)]
    pub shuffle_unit: ShuffleUnit,
    /// Significance level on corrected p-values.
    #[arg(long, default_value_t = 0.05)]
    pub alpha_level: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub preprocess: PreprocessArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TopoArgs {
    /// Dataset bundle files or session directories (all their runs are used).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = BandArg::Both)]
    pub band: BandArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub preprocess: PreprocessArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8750)]
    pub port: u16,
    /// Session directories are created here.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClockArg::Real)]
    pub clock: ClockArg,
    /// replay:<session dir>, synthetic:<profile.json> or stub.
    #[arg(long)]
    pub subject: SubjectSpec,
    #[arg(long)]
    pub auto_rate: bool,
    #[arg(long, default_value_t = CHANCE_PERMUTATIONS)]
    pub permutations: usize,
    /// Events buffered per stream client before it is disconnected.
    #[arg(long, default_value_t = 4096)]
    pub client_buffer: usize,
}
