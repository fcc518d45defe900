//! Streaming inference: posteriors, evidence accumulation, decisions and
//! feedback tones.
//!
//! Evidence is the exponentially smoothed posterior of the Modulated ("Yes")
//! class, `prob <- 0.95 * prob + 0.05 * p`, restarted at 0.5 every trial.
//! The Baseline ("No") evidence is its complement. Decoder outputs arrive
//! once per second, the first one when the first full 2 s window exists.

use std::collections::VecDeque;
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::dataset::TrainedDecoderFile;
use crate::signal::{self, BandFilterBank, BandPowerBaseline, BandPowerFrame, SignalError};
use crate::training::Calibration;
use crate::Class;

pub const SMOOTHING_OLD: f64 = 0.95;
pub const SMOOTHING_NEW: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("frame has {actual} channels, decoder expects {expected}")]
    FeatureMismatch { expected: usize, actual: usize },
    #[error("posterior {0} outside [0, 1]")]
    OutOfRangePosterior(f64),
    #[error("sample stream ended before a decision")]
    StreamEnded,
    #[error("decoding interrupted")]
    Interrupted,
    #[error("invalid decision configuration: {0}")]
    InvalidConfig(String),
    #[error("no baseline captured before decoding")]
    MissingBaseline,
    #[error("subject source failed: {0}")]
    Source(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceState {
    /// Accumulated probability of the Modulated class.
    pub prob_modulated: f64,
    pub smoothing_old: f64,
    pub smoothing_new: f64,
    pub samples_seen: usize,
}

impl Default for EvidenceState {
    fn default() -> Self {
        Self::with_initial(0.5)
    }
}

impl EvidenceState {
    pub fn with_initial(prob_modulated: f64) -> Self {
        Self {
            prob_modulated,
            smoothing_old: SMOOTHING_OLD,
            smoothing_new: SMOOTHING_NEW,
            samples_seen: 0,
        }
    }

    pub fn prob_baseline(&self) -> f64 {
        1.0 - self.prob_modulated
    }

    pub fn prob(&self, class: Class) -> f64 {
        match class {
            Class::Modulated => self.prob_modulated,
            Class::Baseline => self.prob_baseline(),
        }
    }
}

pub fn accumulate(state: &EvidenceState, p: f64) -> Result<EvidenceState, DecodeError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DecodeError::OutOfRangePosterior(p));
    }
    Ok(EvidenceState {
        prob_modulated: state.smoothing_old * state.prob_modulated + state.smoothing_new * p,
        samples_seen: state.samples_seen + 1,
        ..*state
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub yes_threshold: f64,
    pub no_threshold: f64,
    pub timeout_s: f64,
    pub output_period_s: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            yes_threshold: 0.6,
            no_threshold: 0.6,
            timeout_s: 20.0,
            output_period_s: 1.0,
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let ok = |t: f64| t > 0.5 && t <= 1.0;
        if !ok(self.yes_threshold) || !ok(self.no_threshold) {
            return Err(DecodeError::InvalidConfig(format!(
                "thresholds must lie in (0.5, 1], got yes {} / no {}",
                self.yes_threshold, self.no_threshold
            )));
        }
        if !(self.timeout_s > 0.0) || !(self.output_period_s > 0.0) {
            return Err(DecodeError::InvalidConfig(
                "timeout and output period must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Yes,
    No,
    Timeout,
}

impl Outcome {
    pub fn class(self) -> Option<Class> {
        match self {
            Outcome::Yes => Some(Class::Modulated),
            Outcome::No => Some(Class::Baseline),
            Outcome::Timeout => None,
        }
    }

    /// Audio message announcing the outcome.
    pub fn message(self) -> &'static str {
        match self {
            Outcome::Yes => "You selected Yes",
            Outcome::No => "You selected No",
            Outcome::Timeout => "Time out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    /// Seconds from decoding onset.
    pub decision_time_s: f64,
}

/// Yes is checked before No, and both before the timeout.
pub fn check_decision(state: &EvidenceState, config: &DecisionConfig, elapsed_s: f64) -> Option<Decision> {
    let outcome = if state.prob_modulated >= config.yes_threshold {
        Outcome::Yes
    } else if state.prob_baseline() >= config.no_threshold {
        Outcome::No
    } else if elapsed_s >= config.timeout_s {
        return Some(Decision {
            outcome: Outcome::Timeout,
            decision_time_s: config.timeout_s,
        });
    } else {
        return None;
    };
    Some(Decision {
        outcome,
        decision_time_s: elapsed_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneCommand {
    pub frequency_hz: f64,
    pub volume: f64,
}

/// Tone of the favored class, louder the further evidence is from 0.5.
/// Exactly 0.5 maps to the silent Baseline tone.
pub fn feedback_command(state: &EvidenceState) -> ToneCommand {
    let favored = if state.prob_modulated > 0.5 {
        Class::Modulated
    } else {
        Class::Baseline
    };
    ToneCommand {
        frequency_hz: favored.tone_hz(),
        volume: (2.0 * (state.prob_modulated - 0.5).abs()).clamp(0.0, 1.0),
    }
}

/// Linear decision score on the standardized selected features.
pub fn decision_score(decoder: &TrainedDecoderFile, frame: &BandPowerFrame) -> Result<f64, DecodeError> {
    let channels = decoder.channel_names.len();
    if frame.alpha_power.len() != channels || frame.beta_power.len() != channels {
        return Err(DecodeError::FeatureMismatch {
            expected: channels,
            actual: frame.alpha_power.len().max(frame.beta_power.len()),
        });
    }
    let mut score = decoder.svm_bias;
    for (k, feature) in decoder.selected_features.iter().enumerate() {
        let x = frame.band(feature.band)[feature.channel];
        score += decoder.svm_weights[k] * (x - decoder.feature_mean[k]) / decoder.feature_scale[k];
    }
    Ok(score)
}

/// Calibrated probability of the Modulated class for a normalized frame.
pub fn posterior(decoder: &TrainedDecoderFile, frame: &BandPowerFrame) -> Result<f64, DecodeError> {
    let s = decision_score(decoder, frame)?;
    Ok(Calibration {
        a: decoder.calibration_a,
        b: decoder.calibration_b,
    }
    .posterior(s))
}

/// Continuous causal band filtering with a rolling history long enough for
/// one feature window and one baseline window.
#[derive(Debug, Clone)]
pub struct OnlineFeatureExtractor {
    bank: BandFilterBank,
    sample_rate_hz: f64,
    window: usize,
    baseline_len: usize,
    alpha: Vec<VecDeque<f64>>,
    beta: Vec<VecDeque<f64>>,
    baseline: Option<BandPowerBaseline>,
    samples_seen: usize,
}

impl OnlineFeatureExtractor {
    pub fn new(decoder: &TrainedDecoderFile) -> Result<Self, DecodeError> {
        let p = &decoder.preprocessing;
        let channels = decoder.channel_names.len();
        let fs = decoder.sample_rate_hz;
        let baseline_s = match p.baseline {
            crate::dataset::BaselineWindow::PreFeedback { duration_s } => duration_s,
            crate::dataset::BaselineWindow::RestEnd { duration_s, .. } => duration_s,
        };
        let window = signal::seconds_to_samples(p.window_s, fs);
        let baseline_len = signal::seconds_to_samples(baseline_s, fs);
        let cap = window.max(baseline_len);
        Ok(Self {
            bank: BandFilterBank::new(&p.alpha_filter, &p.beta_filter, channels)?,
            sample_rate_hz: fs,
            window,
            baseline_len,
            alpha: vec![VecDeque::with_capacity(cap + 1); channels],
            beta: vec![VecDeque::with_capacity(cap + 1); channels],
            baseline: None,
            samples_seen: 0,
        })
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Filters a channel-major block and updates the history.
    pub fn push(&mut self, block: &[Vec<f32>]) -> Result<(), DecodeError> {
        let as_f64: Vec<Vec<f64>> = block.iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect();
        let (alpha, beta) = self.bank.process(&as_f64)?;
        let cap = self.window.max(self.baseline_len);
        for (hist, new) in self.alpha.iter_mut().zip(alpha).chain(self.beta.iter_mut().zip(beta)) {
            hist.extend(new);
            while hist.len() > cap {
                hist.pop_front();
            }
        }
        self.samples_seen += block.first().map_or(0, Vec::len);
        Ok(())
    }

    fn tail_power(hist: &[VecDeque<f64>], n: usize) -> Vec<f64> {
        hist.iter()
            .map(|h| {
                let start = h.len().saturating_sub(n);
                let tail: Vec<f64> = h.range(start..).copied().collect();
                signal::mean_square(&tail)
            })
            .collect()
    }

    /// Records the power of the most recent baseline-length stretch as the
    /// normalization reference for the coming trial.
    pub fn capture_baseline(&mut self) {
        self.baseline = Some(BandPowerBaseline {
            alpha_power: Self::tail_power(&self.alpha, self.baseline_len),
            beta_power: Self::tail_power(&self.beta, self.baseline_len),
        });
    }

    pub fn baseline(&self) -> Option<&BandPowerBaseline> {
        self.baseline.as_ref()
    }

    /// Normalized frame over the most recent window.
    pub fn current_frame(&self) -> Result<BandPowerFrame, DecodeError> {
        let baseline = self.baseline.as_ref().ok_or(DecodeError::MissingBaseline)?;
        let frame = BandPowerFrame {
            window_end_time_s: self.samples_seen as f64 / self.sample_rate_hz,
            alpha_power: Self::tail_power(&self.alpha, self.window),
            beta_power: Self::tail_power(&self.beta, self.window),
        };
        Ok(signal::normalize_frame(&frame, baseline)?)
    }
}

/// Supplies one posterior per decoder output.
pub trait PosteriorSource {
    /// Posterior for the output at `elapsed_s` after decoding onset, or
    /// `None` when the underlying stream is exhausted.
    fn next_posterior(&mut self, elapsed_s: f64) -> Result<Option<f64>, DecodeError>;
}

/// Replays a fixed posterior sequence, repeating the last value forever
/// when `repeat_last` is set.
#[derive(Debug, Clone)]
pub struct ScriptedPosteriors {
    values: Vec<f64>,
    next: usize,
    repeat_last: bool,
}

impl ScriptedPosteriors {
    pub fn constant(p: f64) -> Self {
        Self {
            values: vec![p],
            next: 0,
            repeat_last: true,
        }
    }

    pub fn finite(values: Vec<f64>) -> Self {
        Self {
            values,
            next: 0,
            repeat_last: false,
        }
    }
}

impl PosteriorSource for ScriptedPosteriors {
    fn next_posterior(&mut self, _elapsed_s: f64) -> Result<Option<f64>, DecodeError> {
        let v = match self.values.get(self.next) {
            Some(&v) => Some(v),
            None if self.repeat_last => self.values.last().copied(),
            None => None,
        };
        self.next += 1;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Seconds from decoding onset.
    pub t: f64,
    pub prob: f64,
}

/// Everything observed at one decoder output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodingStep {
    pub t: f64,
    pub posterior: f64,
    pub state: EvidenceState,
    pub tone: ToneCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDecoding {
    pub decision: Decision,
    pub trace: Vec<TracePoint>,
    pub posteriors: Vec<f64>,
}

/// Output times `window_s, window_s + period, ...` relative to onset.
pub fn output_time(step_index: usize, window_s: f64, config: &DecisionConfig) -> f64 {
    window_s + step_index as f64 * config.output_period_s
}

/// Runs one trial's decoding loop from `onset_s` (session time). `on_step`
/// sees every output before the decision check.
pub fn run_trial_decoding(
    source: &mut dyn PosteriorSource,
    config: &DecisionConfig,
    window_s: f64,
    clock: &mut dyn Clock,
    onset_s: f64,
    interrupt: &AtomicBool,
    mut on_step: impl FnMut(&DecodingStep),
) -> Result<TrialDecoding, DecodeError> {
    config.validate()?;
    let mut state = EvidenceState::default();
    let mut trace = Vec::new();
    let mut posteriors = Vec::new();
    for step in 0.. {
        let t = output_time(step, window_s, config);
        if !clock.advance_to(onset_s + t, interrupt) {
            return Err(DecodeError::Interrupted);
        }
        let p = source.next_posterior(t)?.ok_or(DecodeError::StreamEnded)?;
        state = accumulate(&state, p)?;
        trace.push(TracePoint {
            t,
            prob: state.prob_modulated,
        });
        posteriors.push(p);
        on_step(&DecodingStep {
            t,
            posterior: p,
            state,
            tone: feedback_command(&state),
        });
        if let Some(decision) = check_decision(&state, config, t) {
            return Ok(TrialDecoding {
                decision,
                trace,
                posteriors,
            });
        }
    }
    unreachable!("decoding loop only exits by decision or error")
}
