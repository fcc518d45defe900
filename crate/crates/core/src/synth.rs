//! Deterministic synthetic EEG subject.
//!
//! Each channel carries 1/f background noise. Oscillators add band-limited
//! noise (white noise through a Butterworth band-pass, scaled to unit
//! variance) on chosen channels; while the intent schedule says Modulated,
//! and after the response latency, an oscillator's amplitude is multiplied
//! by its gain.
//!
//! Random draws happen in a fixed sample-major order from one seeded stream,
//! so the output does not depend on how generation is split into blocks.

use std::path::Path;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, Recording, DEFAULT_SAMPLE_RATE_HZ};
use crate::signal::{design_bandpass, step_df2t, FilterCoefficients, FilterSpec, SignalError};
use crate::Class;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oscillator {
    pub channels: Vec<String>,
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    /// Standard deviation in microvolts outside Modulated intervals.
    pub amplitude: f64,
    /// Amplitude multiplier during Modulated intervals.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    /// Standard deviation of the background noise in microvolts.
    pub background_noise_scale: f64,
    pub oscillators: Vec<Oscillator>,
    pub response_latency_s: f64,
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channel_names: Vec<String>,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
}

fn default_channels() -> Vec<String> {
    dataset::montage()
}

fn default_rate() -> f64 {
    DEFAULT_SAMPLE_RATE_HZ
}

pub const BETA_CHANNELS: [&str; 8] = ["F3", "F4", "FC1", "FC5", "C3", "Cz", "CP1", "CP2"];
pub const ALPHA_CHANNELS: [&str; 1] = ["Pz"];

impl SubjectProfile {
    /// Beta oscillators on the fronto-central set and an alpha oscillator
    /// on Pz with the given gains.
    pub fn standard(beta_gain: f64, alpha_gain: f64, seed: u64) -> Self {
        let names = |set: &[&str]| set.iter().map(|s| s.to_string()).collect();
        Self {
            background_noise_scale: 10.0,
            oscillators: vec![
                Oscillator {
                    channels: names(&BETA_CHANNELS),
                    center_hz: 20.0,
                    bandwidth_hz: 8.0,
                    amplitude: 10.0,
                    gain: beta_gain,
                },
                Oscillator {
                    channels: names(&ALPHA_CHANNELS),
                    center_hz: 10.0,
                    bandwidth_hz: 3.0,
                    amplitude: 5.0,
                    gain: alpha_gain,
                },
            ],
            response_latency_s: 0.5,
            seed,
            channel_names: default_channels(),
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        }
    }

    /// The strong subject: beta gain 2, alpha gain 1.5.
    pub fn strong(seed: u64) -> Self {
        Self::standard(2.0, 1.5, seed)
    }

    /// No modulation anywhere.
    pub fn null(seed: u64) -> Self {
        Self::standard(1.0, 1.0, seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidProfile(m));
        if !(self.background_noise_scale >= 0.0) {
            return bad(format!("background_noise_scale {}", self.background_noise_scale));
        }
        if !(self.response_latency_s >= 0.0) {
            return bad(format!("response_latency_s {}", self.response_latency_s));
        }
        if self.channel_names.is_empty() {
            return bad("no channels".into());
        }
        for o in &self.oscillators {
            if !(o.gain >= 1.0) {
                return bad(format!("modulation gain {} below 1", o.gain));
            }
            if !(o.bandwidth_hz > 0.0) {
                return bad(format!("bandwidth {}", o.bandwidth_hz));
            }
            if !(o.amplitude >= 0.0) {
                return bad(format!("amplitude {}", o.amplitude));
            }
            for c in &o.channels {
                if !self.channel_names.contains(c) {
                    return bad(format!("unknown channel {c}"));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let p: Self = dataset::read_json(path)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentInterval {
    pub onset_s: f64,
    pub offset_s: f64,
    pub class: Class,
}

/// Ordered, non-overlapping intervals of intended class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentSchedule {
    pub intervals: Vec<IntentInterval>,
}

impl IntentSchedule {
    pub fn new(intervals: Vec<IntentInterval>) -> Result<Self, SynthError> {
        let s = Self { intervals };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut last_end = f64::NEG_INFINITY;
        for (i, iv) in self.intervals.iter().enumerate() {
            if !(iv.onset_s >= 0.0 && iv.offset_s > iv.onset_s) {
                return Err(SynthError::InvalidSchedule(format!(
                    "interval {i} [{}, {}) is empty or negative",
                    iv.onset_s, iv.offset_s
                )));
            }
            if iv.onset_s < last_end {
                return Err(SynthError::InvalidSchedule(format!(
                    "interval {i} overlaps or precedes its predecessor"
                )));
            }
            last_end = iv.offset_s;
        }
        Ok(())
    }

    pub fn push(&mut self, interval: IntentInterval) -> Result<(), SynthError> {
        self.intervals.push(interval);
        if let Err(e) = self.validate() {
            self.intervals.pop();
            return Err(e);
        }
        Ok(())
    }

    pub fn end_s(&self) -> f64 {
        self.intervals.last().map_or(0.0, |iv| iv.offset_s)
    }

    /// Whether the subject is modulating at `t_s`, given the latency.
    pub fn modulating(&self, t_s: f64, latency_s: f64) -> bool {
        // Intervals are sorted, so a binary search finds the candidate.
        let idx = self.intervals.partition_point(|iv| iv.onset_s + latency_s <= t_s);
        idx > 0 && {
            let iv = &self.intervals[idx - 1];
            iv.class == Class::Modulated && t_s < iv.offset_s
        }
    }
}

/// Paul Kellet's pink-noise filter: a bank of one-pole lowpasses whose sum
/// approximates a 1/f power spectrum over several decades. The slowest pole
/// is left out, so the spectrum flattens below about 0.5 Hz as after an
/// amplifier's high-pass.
#[derive(Debug, Clone, Default)]
struct PinkFilter {
    b: [f64; 7],
}

impl PinkFilter {
    fn step(&mut self, white: f64) -> f64 {
        let b = &mut self.b;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let out = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362;
        b[6] = white * 0.115926;
        out
    }

    /// Output standard deviation for unit white input (impulse response energy).
    fn unit_std() -> f64 {
        let mut f = PinkFilter::default();
        let mut energy = f.step(1.0).powi(2);
        for _ in 0..40_000 {
            energy += f.step(0.0).powi(2);
        }
        energy.sqrt()
    }
}

/// Band-pass filter for one oscillator, scaled to unit output variance.
#[derive(Debug, Clone)]
struct Resonator {
    coeffs: FilterCoefficients,
    z: Vec<f64>,
    norm: f64,
}

impl Resonator {
    fn new(coeffs: &FilterCoefficients) -> Self {
        Self {
            coeffs: coeffs.clone(),
            z: vec![0.0; coeffs.order()],
            norm: 1.0 / coeffs.noise_gain().sqrt(),
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        step_df2t(&self.coeffs.feedforward, &self.coeffs.feedback, &mut self.z, x) * self.norm
    }
}

struct OscillatorState {
    channel: usize,
    amplitude: f64,
    gain: f64,
    filter: Resonator,
}

/// Streaming generator; `next_block` continues where the previous call ended.
pub struct SyntheticStream {
    profile: SubjectProfile,
    rng: ChaCha8Rng,
    pink: Vec<PinkFilter>,
    pink_scale: f64,
    oscillators: Vec<OscillatorState>,
    samples_generated: usize,
}

impl SyntheticStream {
    pub fn new(profile: &SubjectProfile) -> Result<Self, SynthError> {
        profile.validate()?;
        let fs = profile.sample_rate_hz;
        let mut oscillators = Vec::new();
        for o in &profile.oscillators {
            let low = o.center_hz - o.bandwidth_hz / 2.0;
            let high = o.center_hz + o.bandwidth_hz / 2.0;
            let coeffs = design_bandpass(&FilterSpec::new(low, high, fs))?;
            for name in &o.channels {
                let channel = profile
                    .channel_names
                    .iter()
                    .position(|c| c == name)
                    .expect("validated channel");
                oscillators.push(OscillatorState {
                    channel,
                    amplitude: o.amplitude,
                    gain: o.gain,
                    filter: Resonator::new(&coeffs),
                });
            }
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            pink: vec![PinkFilter::default(); profile.channel_names.len()],
            pink_scale: profile.background_noise_scale / PinkFilter::unit_std(),
            oscillators,
            samples_generated: 0,
            profile: profile.clone(),
        })
    }

    pub fn channels(&self) -> usize {
        self.profile.channel_names.len()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.profile.sample_rate_hz
    }

    pub fn samples_generated(&self) -> usize {
        self.samples_generated
    }

    pub fn time_s(&self) -> f64 {
        self.samples_generated as f64 / self.profile.sample_rate_hz
    }

    /// Generates `n` further samples per channel (channel-major).
    pub fn next_block(&mut self, n: usize, schedule: &IntentSchedule) -> Vec<Vec<f32>> {
        let channels = self.channels();
        let mut out = vec![Vec::with_capacity(n); channels];
        let mut frame = vec![0.0f64; channels];
        let fs = self.profile.sample_rate_hz;
        for _ in 0..n {
            let t = self.samples_generated as f64 / fs;
            let modulating = schedule.modulating(t, self.profile.response_latency_s);
            for (c, v) in frame.iter_mut().enumerate() {
                let w: f64 = StandardNormal.sample(&mut self.rng);
                *v = self.pink[c].step(w) * self.pink_scale;
            }
            for osc in &mut self.oscillators {
                let w: f64 = StandardNormal.sample(&mut self.rng);
                let gain = if modulating { osc.gain } else { 1.0 };
                frame[osc.channel] += osc.filter.step(w) * osc.amplitude * gain;
            }
            for (dst, &v) in out.iter_mut().zip(&frame) {
                dst.push(v as f32);
            }
            self.samples_generated += 1;
        }
        out
    }
}

/// Generates a whole recording of `duration_s`.
pub fn generate(
    profile: &SubjectProfile,
    schedule: &IntentSchedule,
    duration_s: f64,
    start_time: DateTime<Utc>,
) -> Result<Recording, SynthError> {
    schedule.validate()?;
    if schedule.end_s() > duration_s + 1e-9 {
        return Err(SynthError::InvalidSchedule(format!(
            "schedule ends at {} s, after the {duration_s} s recording",
            schedule.end_s()
        )));
    }
    let mut stream = SyntheticStream::new(profile)?;
    let n = (duration_s * profile.sample_rate_hz).round() as usize;
    let samples = stream.next_block(n, schedule);
    Ok(Recording::new(
        profile.sample_rate_hz,
        profile.channel_names.clone(),
        samples,
        start_time,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{filter_zero_phase, mean_square};

    fn epoch() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    /// 60 s of 5 s Baseline / 5 s Modulated blocks.
    fn alternating() -> IntentSchedule {
        let intervals = (0..12)
            .map(|i| IntentInterval {
                onset_s: 5.0 * i as f64,
                offset_s: 5.0 * (i + 1) as f64,
                class: if i % 2 == 0 { Class::Baseline } else { Class::Modulated },
            })
            .collect();
        IntentSchedule::new(intervals).unwrap()
    }

    fn band_power_by_class(rec: &Recording, channel: &str, spec: FilterSpec, latency: f64) -> (f64, f64) {
        let c = rec.channel_index(channel).unwrap();
        let x: Vec<f64> = rec.samples[c].iter().map(|&v| v as f64).collect();
        let coeffs = design_bandpass(&spec).unwrap();
        let y = &filter_zero_phase(&coeffs, &[x]).unwrap()[0];
        let fs = rec.sample_rate_hz;
        let (mut modulated, mut baseline) = (Vec::new(), Vec::new());
        for iv in &alternating().intervals {
            // Skip the latency and a filter settling margin at each edge.
            let a = ((iv.onset_s + latency + 0.5) * fs) as usize;
            let b = ((iv.offset_s - 0.5) * fs) as usize;
            let dst = if iv.class == Class::Modulated {
                &mut modulated
            } else {
                &mut baseline
            };
            dst.extend_from_slice(&y[a..b]);
        }
        (mean_square(&modulated), mean_square(&baseline))
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = SubjectProfile::strong(3);
        let a = generate(&p, &alternating(), 60.0, epoch()).unwrap();
        let b = generate(&p, &alternating(), 60.0, epoch()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block_splitting_does_not_change_output() {
        let p = SubjectProfile::strong(4);
        let s = alternating();
        let whole = generate(&p, &s, 60.0, epoch()).unwrap();
        let mut stream = SyntheticStream::new(&p).unwrap();
        let mut pieces = vec![Vec::new(); 32];
        for n in [1, 511, 700, 2000, 27508] {
            for (dst, src) in pieces.iter_mut().zip(stream.next_block(n, &s)) {
                dst.extend(src);
            }
        }
        assert_eq!(pieces, whole.samples);
    }

    #[test]
    fn beta_gain_two_quadruples_cz_power_roughly() {
        let p = SubjectProfile::standard(2.0, 1.0, 5);
        let rec = generate(&p, &alternating(), 60.0, epoch()).unwrap();
        let (m, b) = band_power_by_class(&rec, "Cz", FilterSpec::beta(512.0), 0.5);
        let ratio = m / b;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn alpha_gain_at_pz_only() {
        let p = SubjectProfile::standard(1.0, 2.0, 6);
        let rec = generate(&p, &alternating(), 60.0, epoch()).unwrap();
        let (m, b) = band_power_by_class(&rec, "Pz", FilterSpec::alpha(512.0), 0.5);
        assert!(m / b > 2.5, "Pz ratio {}", m / b);
        let (m, b) = band_power_by_class(&rec, "O1", FilterSpec::alpha(512.0), 0.5);
        assert!((m / b - 1.0).abs() < 0.25, "O1 ratio {}", m / b);
    }

    #[test]
    fn different_seeds_decorrelate() {
        let a = generate(&SubjectProfile::strong(1), &alternating(), 60.0, epoch()).unwrap();
        let b = generate(&SubjectProfile::strong(2), &alternating(), 60.0, epoch()).unwrap();
        for c in 0..32 {
            let x: Vec<f64> = a.samples[c].iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = b.samples[c].iter().map(|&v| v as f64).collect();
            let r = pearson(&x, &y);
            assert!(r.abs() < 0.1, "channel {c}: {r}");
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    /// Welch-free periodogram averaged over 1 s segments, by direct DFT.
    fn spectrum(x: &[f64], fs: usize, freqs: &[usize]) -> Vec<f64> {
        let segs = x.len() / fs;
        freqs
            .iter()
            .map(|&f| {
                (0..segs)
                    .map(|s| {
                        let seg = &x[s * fs..(s + 1) * fs];
                        let (mut re, mut im) = (0.0, 0.0);
                        for (n, v) in seg.iter().enumerate() {
                            let ph = -2.0 * std::f64::consts::PI * f as f64 * n as f64 / fs as f64;
                            re += v * ph.cos();
                            im += v * ph.sin();
                        }
                        re * re + im * im
                    })
                    .sum::<f64>()
                    / segs as f64
            })
            .collect()
    }

    fn spearman(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (k, &i) in idx.iter().enumerate() {
                r[i] = k as f64;
            }
            r
        };
        pearson(&rank(x), &rank(y))
    }

    #[test]
    fn background_spectrum_falls_with_frequency() {
        let mut p = SubjectProfile::null(7);
        p.oscillators.clear();
        let rec = generate(&p, &IntentSchedule::default(), 60.0, epoch()).unwrap();
        let x: Vec<f64> = rec.samples[0].iter().map(|&v| v as f64).collect();
        let freqs: Vec<usize> = (1..=100).collect();
        let s = spectrum(&x, 512, &freqs);
        let f: Vec<f64> = freqs.iter().map(|&f| f as f64).collect();
        let rho = spearman(&f, &s);
        assert!(rho < -0.8, "rank correlation {rho}");
    }

    #[test]
    fn profile_validation() {
        let mut p = SubjectProfile::strong(1);
        p.oscillators[0].gain = 0.5;
        assert!(matches!(p.validate(), Err(SynthError::InvalidProfile(_))));
        let mut p = SubjectProfile::strong(1);
        p.oscillators[0].bandwidth_hz = 0.0;
        assert!(p.validate().is_err());
        let mut p = SubjectProfile::strong(1);
        p.response_latency_s = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn schedule_validation() {
        let iv = |a, b| IntentInterval {
            onset_s: a,
            offset_s: b,
            class: Class::Modulated,
        };
        assert!(IntentSchedule::new(vec![iv(0.0, 2.0), iv(1.0, 3.0)]).is_err());
        assert!(IntentSchedule::new(vec![iv(2.0, 1.0)]).is_err());
        let s = IntentSchedule::new(vec![iv(0.0, 5.0)]).unwrap();
        assert!(matches!(
            generate(&SubjectProfile::strong(1), &s, 4.0, epoch()),
            Err(SynthError::InvalidSchedule(_))
        ));
        assert!(!s.modulating(0.2, 0.5));
        assert!(s.modulating(0.5, 0.5));
        assert!(!s.modulating(5.0, 0.5));
    }
}
