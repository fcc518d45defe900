//! Band-pass filtering and band-power features.
//!
//! Two paths share one filter design:
//!
//! - the causal streaming path ([`filter_block`], [`BandFilterBank`]) used
//!   online and for training, where block boundaries never change the output;
//! - the zero-phase path ([`filter_zero_phase`]) used only for offline
//!   topographic analysis.
//!
//! "Second-order Butterworth" means a second-order analog low-pass prototype
//! transformed to a band-pass, so a `prototype_order` of 2 yields a
//! fourth-order digital filter with five feedforward and five feedback
//! coefficients. The digital realization is the bilinear transform with both
//! band edges pre-warped, which places the -3 dB points exactly on the
//! requested cut frequencies.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Baseline powers below this are treated as sensor dropouts.
pub const BASELINE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("invalid band {low_hz}-{high_hz} Hz at sample rate {sample_rate_hz} Hz")]
    InvalidBand {
        low_hz: f64,
        high_hz: f64,
        sample_rate_hz: f64,
    },
    #[error("prototype order must be at least 1")]
    InvalidOrder,
    #[error("expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("signal of {len} samples is too short for zero-phase filtering (need more than {min})")]
    SignalTooShort { len: usize, min: usize },
    #[error("need at least {needed} samples for one window, got {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("baseline power {value} for {band} channel {channel} is below {BASELINE_EPSILON}")]
    DegenerateBaseline { band: Band, channel: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Alpha,
    Beta,
}

impl Band {
    pub const ALL: [Band; 2] = [Band::Alpha, Band::Beta];

    /// Position of the band in the concatenated feature vector.
    pub fn index(self) -> usize {
        match self {
            Band::Alpha => 0,
            Band::Beta => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Band> {
        match index {
            0 => Some(Band::Alpha),
            1 => Some(Band::Beta),
            _ => None,
        }
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Band::Alpha => f.write_str("alpha"),
            Band::Beta => f.write_str("beta"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    Causal,
    ZeroPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub prototype_order: usize,
    pub sample_rate_hz: f64,
    pub phase_mode: PhaseMode,
}

impl FilterSpec {
    pub fn new(low_cut_hz: f64, high_cut_hz: f64, sample_rate_hz: f64) -> Self {
        Self {
            low_cut_hz,
            high_cut_hz,
            prototype_order: 2,
            sample_rate_hz,
            phase_mode: PhaseMode::Causal,
        }
    }

    /// 7-12 Hz.
    pub fn alpha(sample_rate_hz: f64) -> Self {
        Self::new(7.0, 12.0, sample_rate_hz)
    }

    /// 12-30 Hz.
    pub fn beta(sample_rate_hz: f64) -> Self {
        Self::new(12.0, 30.0, sample_rate_hz)
    }

    /// 7-30 Hz display band.
    pub fn wide(sample_rate_hz: f64) -> Self {
        Self::new(7.0, 30.0, sample_rate_hz)
    }

    pub fn for_band(band: Band, sample_rate_hz: f64) -> Self {
        match band {
            Band::Alpha => Self::alpha(sample_rate_hz),
            Band::Beta => Self::beta(sample_rate_hz),
        }
    }

    pub fn with_phase_mode(mut self, phase_mode: PhaseMode) -> Self {
        self.phase_mode = phase_mode;
        self
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.prototype_order == 0 {
            return Err(SignalError::InvalidOrder);
        }
        let nyquist = self.sample_rate_hz / 2.0;
        let ordered = 0.0 < self.low_cut_hz && self.low_cut_hz < self.high_cut_hz && self.high_cut_hz < nyquist;
        if !ordered || !self.sample_rate_hz.is_finite() {
            return Err(SignalError::InvalidBand {
                low_hz: self.low_cut_hz,
                high_hz: self.high_cut_hz,
                sample_rate_hz: self.sample_rate_hz,
            });
        }
        Ok(())
    }
}

/// Transfer function `B(z)/A(z)` with `feedback[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub feedforward: Vec<f64>,
    pub feedback: Vec<f64>,
}

impl FilterCoefficients {
    /// Digital filter order (length of the delay line).
    pub fn order(&self) -> usize {
        self.feedback.len().max(self.feedforward.len()) - 1
    }

    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        let eval = |coeffs: &[f64]| {
            coeffs
                .iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z_inv + c)
        };
        eval(&self.feedforward) / eval(&self.feedback)
    }

    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        self.response(freq_hz, sample_rate_hz).norm()
    }

    /// Schur-Cohn step-down test: every reflection coefficient must have
    /// modulus below one for all roots of the feedback polynomial to lie
    /// strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        let a0 = self.feedback[0];
        let mut poly: Vec<f64> = self.feedback.iter().map(|c| c / a0).collect();
        while poly.len() > 1 {
            let m = poly.len() - 1;
            let k = poly[m];
            if !k.is_finite() || k.abs() >= 1.0 {
                return false;
            }
            let denom = 1.0 - k * k;
            poly = (0..m).map(|i| (poly[i] - k * poly[m - i]) / denom).collect();
        }
        true
    }

    /// Sum of the squared impulse response, i.e. the output variance for
    /// unit-variance white input.
    pub fn noise_gain(&self) -> f64 {
        let mut state = vec![0.0; self.order()];
        let mut energy = 0.0;
        let mut quiet = 0;
        for n in 0..1_000_000 {
            let x = if n == 0 { 1.0 } else { 0.0 };
            let y = step_df2t(&self.feedforward, &self.feedback, &mut state, x);
            energy += y * y;
            // Stop once the tail is negligible for a long stretch.
            if n > 16 && y * y < 1e-20 * energy {
                quiet += 1;
                if quiet > 256 {
                    break;
                }
            } else {
                quiet = 0;
            }
        }
        energy
    }
}

/// Butterworth band-pass design by analog prototype, low-pass to band-pass
/// transform and pre-warped bilinear transform.
pub fn design_bandpass(spec: &FilterSpec) -> Result<FilterCoefficients, SignalError> {
    spec.validate()?;
    let n = spec.prototype_order;
    let fs = spec.sample_rate_hz;
    let fs2 = 2.0 * fs;
    let warp = |f: f64| fs2 * (PI * f / fs).tan();
    let w1 = warp(spec.low_cut_hz);
    let w2 = warp(spec.high_cut_hz);
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    // Analog band-pass poles: each prototype pole p splits into the roots of
    // s^2 - p*bw*s + w0^2.
    let mut analog_poles = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = PI / 2.0 + (2 * k + 1) as f64 * PI / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * bw / 2.0;
        let disc = (half * half - w0_sq).sqrt();
        analog_poles.push(half + disc);
        analog_poles.push(half - disc);
    }

    // n analog zeros at s = 0 map to z = 1; the n zeros at infinity map to z = -1.
    let digital_poles: Vec<Complex64> = analog_poles.iter().map(|&s| (fs2 + s) / (fs2 - s)).collect();
    let mut digital_zeros = vec![Complex64::new(1.0, 0.0); n];
    digital_zeros.extend(std::iter::repeat(Complex64::new(-1.0, 0.0)).take(n));

    let pole_term = analog_poles
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, &s| acc * (fs2 - s));
    let gain = (Complex64::new(bw.powi(n as i32) * fs2.powi(n as i32), 0.0) / pole_term).re;

    let feedforward: Vec<f64> = poly_from_roots(&digital_zeros).into_iter().map(|c| c * gain).collect();
    let feedback = poly_from_roots(&digital_poles);
    Ok(FilterCoefficients { feedforward, feedback })
}

/// Monic polynomial coefficients (highest power first) with the given roots;
/// conjugate-paired roots give real coefficients.
fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.into_iter().map(|c| c.re).collect()
}

#[inline]
pub(crate) fn step_df2t(b: &[f64], a: &[f64], z: &mut [f64], x: f64) -> f64 {
    let order = z.len();
    let bk = |i: usize| b.get(i).copied().unwrap_or(0.0);
    let ak = |i: usize| a.get(i).copied().unwrap_or(0.0);
    if order == 0 {
        return bk(0) * x;
    }
    let y = bk(0) * x + z[0];
    for i in 0..order - 1 {
        z[i] = bk(i + 1) * x + z[i + 1] - ak(i + 1) * y;
    }
    z[order - 1] = bk(order) * x - ak(order) * y;
    y
}

/// Per-channel delay lines of a transposed direct-form II filter.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFilterState {
    delays: Vec<Vec<f64>>,
}

impl StreamFilterState {
    pub fn new(coeffs: &FilterCoefficients, channels: usize) -> Self {
        Self {
            delays: vec![vec![0.0; coeffs.order()]; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.delays.len()
    }

    pub fn reset(&mut self) {
        for d in &mut self.delays {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Filters one block of channel-major samples, carrying state across calls.
pub fn filter_block<S: AsRef<[f64]>>(
    coeffs: &FilterCoefficients,
    state: &mut StreamFilterState,
    block: &[S],
) -> Result<Vec<Vec<f64>>, SignalError> {
    if block.len() != state.channels() {
        return Err(SignalError::ChannelMismatch {
            expected: state.channels(),
            actual: block.len(),
        });
    }
    Ok(block
        .iter()
        .zip(state.delays.iter_mut())
        .map(|(channel, z)| {
            channel
                .as_ref()
                .iter()
                .map(|&x| step_df2t(&coeffs.feedforward, &coeffs.feedback, z, x))
                .collect()
        })
        .collect())
}

/// Delay-line state of a filter that has seen a constant unit input forever.
fn steady_state(coeffs: &FilterCoefficients) -> Vec<f64> {
    let order = coeffs.order();
    let b = |i: usize| coeffs.feedforward.get(i).copied().unwrap_or(0.0);
    let a = |i: usize| coeffs.feedback.get(i).copied().unwrap_or(0.0);
    let dc = (0..=order).map(b).sum::<f64>() / (0..=order).map(a).sum::<f64>();
    let mut z = vec![0.0; order];
    let mut acc = 0.0;
    for i in (0..order).rev() {
        acc += b(i + 1) - a(i + 1) * dc;
        z[i] = acc;
    }
    z
}

fn filter_with_initial(coeffs: &FilterCoefficients, x: &[f64], mut z: Vec<f64>) -> Vec<f64> {
    x.iter()
        .map(|&v| step_df2t(&coeffs.feedforward, &coeffs.feedback, &mut z, v))
        .collect()
}

/// Forward-backward filtering with odd reflective padding of
/// `3 * order` samples and steady-state initial conditions on both passes.
pub fn filter_zero_phase<S: AsRef<[f64]>>(
    coeffs: &FilterCoefficients,
    signal: &[S],
) -> Result<Vec<Vec<f64>>, SignalError> {
    let pad = 3 * coeffs.order();
    let zi = steady_state(coeffs);
    signal
        .iter()
        .map(|channel| {
            let x = channel.as_ref();
            if x.len() <= pad {
                return Err(SignalError::SignalTooShort { len: x.len(), min: pad });
            }
            let n = x.len();
            let mut ext = Vec::with_capacity(n + 2 * pad);
            ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
            ext.extend_from_slice(x);
            ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

            let scaled = |v: f64| zi.iter().map(|z| z * v).collect::<Vec<_>>();
            let mut forward = filter_with_initial(coeffs, &ext, scaled(ext[0]));
            forward.reverse();
            let mut backward = filter_with_initial(coeffs, &forward, scaled(forward[0]));
            backward.reverse();
            Ok(backward[pad..pad + n].to_vec())
        })
        .collect()
}

/// Alpha and beta streaming filters over the same multichannel stream.
#[derive(Debug, Clone)]
pub struct BandFilterBank {
    alpha: FilterCoefficients,
    beta: FilterCoefficients,
    alpha_state: StreamFilterState,
    beta_state: StreamFilterState,
}

impl BandFilterBank {
    pub fn new(alpha: &FilterSpec, beta: &FilterSpec, channels: usize) -> Result<Self, SignalError> {
        let alpha = design_bandpass(alpha)?;
        let beta = design_bandpass(beta)?;
        Ok(Self {
            alpha_state: StreamFilterState::new(&alpha, channels),
            beta_state: StreamFilterState::new(&beta, channels),
            alpha,
            beta,
        })
    }

    pub fn channels(&self) -> usize {
        self.alpha_state.channels()
    }

    /// Returns `(alpha, beta)` filtered blocks.
    pub fn process<S: AsRef<[f64]>>(&mut self, block: &[S]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), SignalError> {
        let a = filter_block(&self.alpha, &mut self.alpha_state, block)?;
        let b = filter_block(&self.beta, &mut self.beta_state, block)?;
        Ok((a, b))
    }
}

/// Per-channel alpha and beta power over one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPowerFrame {
    pub window_end_time_s: f64,
    pub alpha_power: Vec<f64>,
    pub beta_power: Vec<f64>,
}

impl BandPowerFrame {
    pub fn channels(&self) -> usize {
        self.alpha_power.len()
    }

    pub fn band(&self, band: Band) -> &[f64] {
        match band {
            Band::Alpha => &self.alpha_power,
            Band::Beta => &self.beta_power,
        }
    }

    /// Alpha powers for every channel followed by beta powers, so feature
    /// `band_index * channels + channel_index`.
    pub fn feature_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.channels());
        v.extend_from_slice(&self.alpha_power);
        v.extend_from_slice(&self.beta_power);
        v
    }
}

/// Resting reference power per channel and band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPowerBaseline {
    pub alpha_power: Vec<f64>,
    pub beta_power: Vec<f64>,
}

pub fn mean_square(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64
}

/// Mean squared value of every channel over `range`.
pub fn window_power<S: AsRef<[f64]>>(filtered: &[S], range: std::ops::Range<usize>) -> Vec<f64> {
    filtered
        .iter()
        .map(|c| mean_square(&c.as_ref()[range.clone()]))
        .collect()
}

pub fn seconds_to_samples(seconds: f64, sample_rate_hz: f64) -> usize {
    (seconds * sample_rate_hz).round() as usize
}

/// Sliding-window band power. A frame ending at sample `e` covers
/// `[e - window, e)`, i.e. the time interval `(t - window_s, t]`.
pub fn band_power_frames<S: AsRef<[f64]>>(
    filtered_alpha: &[S],
    filtered_beta: &[S],
    sample_rate_hz: f64,
    window_s: f64,
    step_s: f64,
) -> Result<Vec<BandPowerFrame>, SignalError> {
    if filtered_alpha.len() != filtered_beta.len() {
        return Err(SignalError::ChannelMismatch {
            expected: filtered_alpha.len(),
            actual: filtered_beta.len(),
        });
    }
    let window = seconds_to_samples(window_s, sample_rate_hz);
    let step = seconds_to_samples(step_s, sample_rate_hz).max(1);
    let available = filtered_alpha
        .iter()
        .chain(filtered_beta.iter())
        .map(|c| c.as_ref().len())
        .min()
        .unwrap_or(0);
    if window == 0 || available < window {
        return Err(SignalError::InsufficientSamples {
            needed: window.max(1),
            available,
        });
    }
    let count = (available - window) / step + 1;
    Ok((0..count)
        .map(|k| {
            let end = window + k * step;
            BandPowerFrame {
                window_end_time_s: end as f64 / sample_rate_hz,
                alpha_power: window_power(filtered_alpha, end - window..end),
                beta_power: window_power(filtered_beta, end - window..end),
            }
        })
        .collect())
}

/// Divides every band power by its baseline entry.
pub fn normalize_frame(frame: &BandPowerFrame, baseline: &BandPowerBaseline) -> Result<BandPowerFrame, SignalError> {
    let divide = |band: Band, values: &[f64], base: &[f64]| {
        if values.len() != base.len() {
            return Err(SignalError::ChannelMismatch {
                expected: base.len(),
                actual: values.len(),
            });
        }
        values
            .iter()
            .zip(base)
            .enumerate()
            .map(|(channel, (&v, &b))| {
                if !(b >= BASELINE_EPSILON) {
                    Err(SignalError::DegenerateBaseline {
                        band,
                        channel,
                        value: b,
                    })
                } else {
                    Ok(v / b)
                }
            })
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(BandPowerFrame {
        window_end_time_s: frame.window_end_time_s,
        alpha_power: divide(Band::Alpha, &frame.alpha_power, &baseline.alpha_power)?,
        beta_power: divide(Band::Beta, &frame.beta_power, &baseline.beta_power)?,
    })
}
