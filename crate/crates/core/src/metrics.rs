//! Online performance metrics and the statistical analyses.
//!
//! - Cohen's kappa with a permutation chance level;
//! - bar dynamics: share of decoder outputs on which the accumulated
//!   evidence favors the true class (strictly, so 0.5 favors neither);
//! - hits at a fixed threshold and latency to the correct hit;
//! - per-channel two-tailed permutation tests with Benjamini-Hochberg
//!   adjustment, and class-wise topographic differences.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureSet;
use crate::online::{Outcome, TracePoint};
use crate::signal::Band;
use crate::Class;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("empty trace")]
    EmptyTrace,
    #[error("each group needs at least 2 samples per channel")]
    TooFewSamples,
    #[error("p-value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("both classes are required")]
    DegenerateLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    /// Observed agreement.
    pub p_a: f64,
    /// Chance agreement from the marginals.
    pub p_e: f64,
}

/// Chance-corrected agreement. Labels may use any set of categories (a
/// timed-out prediction is simply a category no true label has). When the
/// chance agreement is 1 the kappa is declared 0.
pub fn cohen_kappa<L: Ord + Clone>(predicted: &[L], truth: &[L]) -> Result<KappaResult, StatsError> {
    if predicted.len() != truth.len() {
        return Err(StatsError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let n = predicted.len();
    let mut marginals: BTreeMap<&L, (u64, u64)> = BTreeMap::new();
    let mut agree = 0u64;
    for (p, t) in predicted.iter().zip(truth) {
        marginals.entry(p).or_default().0 += 1;
        marginals.entry(t).or_default().1 += 1;
        if p == t {
            agree += 1;
        }
    }
    let chance: u64 = marginals.values().map(|&(a, b)| a * b).sum();
    let p_a = agree as f64 / n as f64;
    let p_e = chance as f64 / (n as f64 * n as f64);
    // (p_a - p_e) / (1 - p_e) scaled by n^2: one rounding instead of four.
    let nn = (n as u64) * (n as u64);
    let kappa = if chance >= nn {
        0.0
    } else {
        (n as i128 * agree as i128 - chance as i128) as f64 / (nn - chance) as f64
    };
    Ok(KappaResult { kappa, p_a, p_e })
}

fn mean_permuted_kappa<L: Ord + Clone>(
    fixed: &[L],
    shuffled: &[L],
    n_perm: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    if shuffled.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    if n_perm == 0 {
        return Err(StatsError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = shuffled.to_vec();
    let mut total = 0.0;
    for _ in 0..n_perm {
        perm.shuffle(&mut rng);
        total += cohen_kappa(fixed, &perm)?.kappa;
    }
    Ok(total / n_perm as f64)
}

/// Mean kappa between the labels and uniformly permuted copies of themselves.
pub fn chance_kappa<L: Ord + Clone>(truth: &[L], n_perm: usize, seed: u64) -> Result<f64, StatsError> {
    mean_permuted_kappa(truth, truth, n_perm, seed)
}

/// Mean kappa between fixed predictions and permuted true labels.
pub fn chance_kappa_of_predictions<L: Ord + Clone>(
    predicted: &[L],
    truth: &[L],
    n_perm: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    if predicted.len() != truth.len() {
        return Err(StatsError::LengthMismatch(predicted.len(), truth.len()));
    }
    mean_permuted_kappa(predicted, truth, n_perm, seed)
}

/// One decoded trial as seen by the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTrace {
    pub trial_id: usize,
    pub true_class: Class,
    pub points: Vec<TracePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

fn favors(prob_modulated: f64, class: Class) -> bool {
    match class {
        Class::Modulated => prob_modulated > 0.5,
        Class::Baseline => prob_modulated < 0.5,
    }
}

/// Percentage of outputs on which the evidence strictly favors the true class.
pub fn bar_dynamics(trace: &TrialTrace) -> Result<f64, StatsError> {
    if trace.points.is_empty() {
        return Err(StatsError::EmptyTrace);
    }
    let good = trace.points.iter().filter(|p| favors(p.prob, trace.true_class)).count();
    Ok(100.0 * good as f64 / trace.points.len() as f64)
}

/// First threshold crossing of either class, Yes checked first.
pub fn first_crossing(points: &[TracePoint], threshold: f64) -> Option<(Class, f64)> {
    points.iter().find_map(|p| {
        if p.prob >= threshold {
            Some((Class::Modulated, p.t))
        } else if 1.0 - p.prob >= threshold {
            Some((Class::Baseline, p.t))
        } else {
            None
        }
    })
}

/// Percentage of trials whose simulated first crossing names the true class.
pub fn hits_at_threshold(traces: &[TrialTrace], threshold: f64) -> Result<f64, StatsError> {
    if traces.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let hits = traces
        .iter()
        .filter(|t| first_crossing(&t.points, threshold).map(|(c, _)| c) == Some(t.true_class))
        .count();
    Ok(100.0 * hits as f64 / traces.len() as f64)
}

/// Time of the first output at which the true class's evidence reaches the
/// threshold.
pub fn latency_to_correct_hit(trace: &TrialTrace, threshold: f64) -> Option<f64> {
    trace
        .points
        .iter()
        .find(|p| {
            let evidence = match trace.true_class {
                Class::Modulated => p.prob,
                Class::Baseline => 1.0 - p.prob,
            };
            evidence >= threshold
        })
        .map(|p| p.t)
}

fn check_groups(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(), StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let counts = |g: &[Vec<f64>]| {
        let n = g[0].len();
        g.iter().all(|c| c.len() == n).then_some(n)
    };
    match (counts(a), counts(b)) {
        (Some(na), Some(nb)) if na >= 2 && nb >= 2 => Ok(()),
        (Some(_), Some(_)) => Err(StatsError::TooFewSamples),
        _ => Err(StatsError::EmptyInput),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Raw two-tailed permutation p-values per channel. `group_a[c]` holds the
/// samples of channel `c`. Each shuffle reassigns the pooled samples with a
/// single permutation shared by all channels; p is the fraction of shuffles
/// whose absolute mean difference equals or exceeds the observed one.
pub fn channel_permutation_test(
    group_a: &[Vec<f64>],
    group_b: &[Vec<f64>],
    n_shuffles: usize,
    seed: u64,
) -> Result<Vec<f64>, StatsError> {
    check_groups(group_a, group_b)?;
    if n_shuffles == 0 {
        return Err(StatsError::EmptyInput);
    }
    let na = group_a[0].len();
    let pooled: Vec<Vec<f64>> = group_a
        .iter()
        .zip(group_b)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    let observed: Vec<f64> = group_a
        .iter()
        .zip(group_b)
        .map(|(a, b)| (mean(a) - mean(b)).abs())
        .collect();
    let total: usize = pooled[0].len();
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = vec![0usize; pooled.len()];
    for _ in 0..n_shuffles {
        idx.shuffle(&mut rng);
        for (c, values) in pooled.iter().enumerate() {
            let sum_a: f64 = idx[..na].iter().map(|&i| values[i]).sum();
            let sum_b: f64 = idx[na..].iter().map(|&i| values[i]).sum();
            let diff = (sum_a / na as f64 - sum_b / (total - na) as f64).abs();
            // Equal partitions can differ in the last bits through summation order.
            let slack = 1e-12 * (observed[c].abs() + 1e-300);
            if diff >= observed[c] - slack {
                exceed[c] += 1;
            }
        }
    }
    Ok(exceed.into_iter().map(|k| k as f64 / n_shuffles as f64).collect())
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_correct(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::OutOfRange(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (1..=m).rev() {
        let i = order[rank - 1];
        running = running.min(p_values[i] * (m as f64 / rank as f64)).min(1.0);
        adjusted[i] = running;
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTestResult {
    pub channel_names: Vec<String>,
    /// Mean of group A minus mean of group B per channel.
    pub observed_diff: Vec<f64>,
    pub p_raw: Vec<f64>,
    pub p_adjusted: Vec<f64>,
    pub n_shuffles: usize,
}

impl ChannelTestResult {
    pub fn significant(&self, alpha: f64) -> Vec<&str> {
        self.channel_names
            .iter()
            .zip(&self.p_adjusted)
            .filter(|(_, &p)| p <= alpha)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Formats a permutation p-value, writing 0 as "< 1/N".
pub fn format_p_value(p: f64, n_shuffles: usize) -> String {
    if p == 0.0 {
        format!("< {}", 1.0 / n_shuffles as f64)
    } else {
        format!("{p:.4}")
    }
}

pub fn channel_test(
    channel_names: &[String],
    group_a: &[Vec<f64>],
    group_b: &[Vec<f64>],
    n_shuffles: usize,
    seed: u64,
) -> Result<ChannelTestResult, StatsError> {
    let p_raw = channel_permutation_test(group_a, group_b, n_shuffles, seed)?;
    let p_adjusted = bh_correct(&p_raw)?;
    Ok(ChannelTestResult {
        channel_names: channel_names.to_vec(),
        observed_diff: group_a.iter().zip(group_b).map(|(a, b)| mean(a) - mean(b)).collect(),
        p_raw,
        p_adjusted,
        n_shuffles,
    })
}

/// Splits one band of labeled frames into per-channel (Modulated, Baseline)
/// sample groups.
pub fn class_groups(data: &FeatureSet, band: Band, channels: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut modulated = vec![Vec::new(); channels];
    let mut baseline = vec![Vec::new(); channels];
    for (row, &label) in data.features.iter().zip(&data.labels) {
        let target = match label {
            Class::Modulated => &mut modulated,
            Class::Baseline => &mut baseline,
        };
        for (c, dst) in target.iter_mut().enumerate() {
            dst.push(row[band.index() * channels + c]);
        }
    }
    (modulated, baseline)
}

/// One band of labeled frames summed per trial, the unit that stays
/// together when labels are shuffled.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialBlocks {
    pub channel_names: Vec<String>,
    pub class: Vec<Class>,
    pub frames: Vec<usize>,
    /// `sums[channel][trial]`.
    pub sums: Vec<Vec<f64>>,
}

impl TrialBlocks {
    /// Groups frames by `(run_index, trial_index)`. Frames of one trial
    /// must share a label.
    pub fn new(data: &FeatureSet, band: Band, channel_names: &[String]) -> Result<Self, StatsError> {
        let channels = channel_names.len();
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut blocks = TrialBlocks {
            channel_names: channel_names.to_vec(),
            class: Vec::new(),
            frames: Vec::new(),
            sums: vec![Vec::new(); channels],
        };
        for (i, (row, &label)) in data.features.iter().zip(&data.labels).enumerate() {
            let key = (data.run_index[i], data.trial_index[i]);
            let b = *index.entry(key).or_insert_with(|| {
                blocks.class.push(label);
                blocks.frames.push(0);
                blocks.sums.iter_mut().for_each(|s| s.push(0.0));
                blocks.class.len() - 1
            });
            if blocks.class[b] != label {
                return Err(StatsError::DegenerateLabels);
            }
            blocks.frames[b] += 1;
            for (c, sums) in blocks.sums.iter_mut().enumerate() {
                sums[b] += row[band.index() * channels + c];
            }
        }
        let count = |k: Class| blocks.class.iter().filter(|&&c| c == k).count();
        match (count(Class::Modulated), count(Class::Baseline)) {
            (0, _) | (_, 0) => Err(StatsError::EmptyInput),
            (a, b) if a < 2 || b < 2 => Err(StatsError::TooFewSamples),
            _ => Ok(blocks),
        }
    }

    /// Mean Modulated minus mean Baseline frame value per channel, for the
    /// given trial labels.
    fn differences(&self, class: &[Class]) -> Vec<f64> {
        let (mut na, mut nb) = (0usize, 0usize);
        for (&k, &n) in class.iter().zip(&self.frames) {
            match k {
                Class::Modulated => na += n,
                Class::Baseline => nb += n,
            }
        }
        self.sums
            .iter()
            .map(|sums| {
                let (mut sa, mut sb) = (0.0, 0.0);
                for (&k, &v) in class.iter().zip(sums) {
                    match k {
                        Class::Modulated => sa += v,
                        Class::Baseline => sb += v,
                    }
                }
                sa / na as f64 - sb / nb as f64
            })
            .collect()
    }
}

/// Two-tailed permutation test on frame means where each shuffle permutes
/// the trial labels, so the overlapping frames of a trial, which also
/// share its baseline, move together. p is the fraction of shuffles whose
/// absolute difference equals or exceeds the observed one.
pub fn trial_permutation_test(blocks: &TrialBlocks, n_shuffles: usize, seed: u64) -> Result<Vec<f64>, StatsError> {
    if n_shuffles == 0 {
        return Err(StatsError::EmptyInput);
    }
    let observed: Vec<f64> = blocks.differences(&blocks.class).iter().map(|d| d.abs()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = blocks.class.clone();
    let mut exceed = vec![0usize; observed.len()];
    for _ in 0..n_shuffles {
        labels.shuffle(&mut rng);
        for (c, d) in blocks.differences(&labels).into_iter().enumerate() {
            let slack = 1e-12 * (observed[c].abs() + 1e-300);
            if d.abs() >= observed[c] - slack {
                exceed[c] += 1;
            }
        }
    }
    Ok(exceed.into_iter().map(|k| k as f64 / n_shuffles as f64).collect())
}

/// [`channel_test`] with trial-level shuffling.
pub fn channel_test_by_trial(
    blocks: &TrialBlocks,
    n_shuffles: usize,
    seed: u64,
) -> Result<ChannelTestResult, StatsError> {
    let p_raw = trial_permutation_test(blocks, n_shuffles, seed)?;
    let p_adjusted = bh_correct(&p_raw)?;
    Ok(ChannelTestResult {
        channel_names: blocks.channel_names.clone(),
        observed_diff: blocks.differences(&blocks.class),
        p_raw,
        p_adjusted,
        n_shuffles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDifference {
    pub channel: String,
    pub band: Band,
    /// Mean Modulated minus mean Baseline normalized power.
    pub difference: f64,
    pub std_error: f64,
}

/// Class-wise mean difference per channel for one band.
pub fn topo_class_difference(
    data: &FeatureSet,
    band: Band,
    channel_names: &[String],
) -> Result<Vec<ChannelDifference>, StatsError> {
    let channels = channel_names.len();
    let (modulated, baseline) = class_groups(data, band, channels);
    if modulated.first().is_none_or(Vec::is_empty) || baseline.first().is_none_or(Vec::is_empty) {
        return Err(StatsError::DegenerateLabels);
    }
    let var = |v: &[f64]| {
        let m = mean(v);
        if v.len() < 2 {
            return 0.0;
        }
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    Ok((0..channels)
        .map(|c| {
            let (a, b) = (&modulated[c], &baseline[c]);
            ChannelDifference {
                channel: channel_names[c].clone(),
                band,
                difference: mean(a) - mean(b),
                std_error: (var(a) / a.len() as f64 + var(b) / b.len() as f64).sqrt(),
            }
        })
        .collect())
}

/// Metrics of one run of decoded trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_trials: usize,
    pub kappa: KappaResult,
    pub chance_kappa: f64,
    /// Mean over trials.
    pub bar_dynamics: f64,
    pub hits_at_threshold: f64,
    pub threshold: f64,
    /// Mean over trials with a correct hit, if any.
    pub mean_latency_s: Option<f64>,
    pub latencies_s: Vec<Option<f64>>,
}

pub const CHANCE_PERMUTATIONS: usize = 10_000;

/// Kappa, bar dynamics, hits and latency for a set of trials. Predictions
/// come from each trial's outcome; a timeout is its own category.
pub fn evaluate_trials(
    traces: &[TrialTrace],
    threshold: f64,
    n_perm: usize,
    seed: u64,
) -> Result<RunMetrics, StatsError> {
    if traces.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let predicted: Vec<Option<Class>> = traces.iter().map(|t| t.outcome.and_then(Outcome::class)).collect();
    let truth: Vec<Option<Class>> = traces.iter().map(|t| Some(t.true_class)).collect();
    let kappa = cohen_kappa(&predicted, &truth)?;
    let chance = chance_kappa_of_predictions(&predicted, &truth, n_perm, seed)?;
    let bars: Vec<f64> = traces.iter().map(bar_dynamics).collect::<Result<_, _>>()?;
    let latencies: Vec<Option<f64>> = traces.iter().map(|t| latency_to_correct_hit(t, threshold)).collect();
    let hit_latencies: Vec<f64> = latencies.iter().flatten().copied().collect();
    Ok(RunMetrics {
        n_trials: traces.len(),
        kappa,
        chance_kappa: chance,
        bar_dynamics: mean(&bars),
        hits_at_threshold: hits_at_threshold(traces, threshold)?,
        threshold,
        mean_latency_s: (!hit_latencies.is_empty()).then(|| mean(&hit_latencies)),
        latencies_s: latencies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use Class::{Baseline as N, Modulated as Y};

    /// Brute-force kappa from an explicit 2x2 (or larger) confusion matrix.
    fn kappa_oracle(pred: &[u8], truth: &[u8], k: usize) -> f64 {
        let n = pred.len();
        let mut m = vec![vec![0u64; k]; k];
        for (&p, &t) in pred.iter().zip(truth) {
            m[p as usize][t as usize] += 1;
        }
        let diag: u64 = (0..k).map(|i| m[i][i]).sum();
        let row = |i: usize| m[i].iter().sum::<u64>();
        let col = |j: usize| (0..k).map(|i| m[i][j]).sum::<u64>();
        let chance: u64 = (0..k).map(|c| row(c) * col(c)).sum();
        // Exact rational value, rounded once.
        let (n, diag, chance) = (n as i64, diag as i64, chance as i64);
        if chance == n * n {
            0.0
        } else {
            (n * diag - chance) as f64 / (n * n - chance) as f64
        }
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[Y, N, Y, N], &[Y, N, Y, N]).unwrap().kappa, 1.0);
        let r = cohen_kappa(&[Y, Y, Y, N], &[Y, Y, N, N]).unwrap();
        assert_eq!((r.p_a, r.p_e, r.kappa), (0.75, 0.5, 0.5));
        let r = cohen_kappa(&[Y, Y, Y, Y], &[Y, Y, N, N]).unwrap();
        assert_eq!((r.p_a, r.p_e, r.kappa), (0.5, 0.5, 0.0));
        assert_eq!(cohen_kappa::<Class>(&[], &[]), Err(StatsError::EmptyInput));
        assert_eq!(cohen_kappa(&[Y], &[Y, N]), Err(StatsError::LengthMismatch(1, 2)));
    }

    #[test]
    fn kappa_matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            assert_eq!(
                cohen_kappa(&pred, &truth).unwrap().kappa,
                kappa_oracle(&pred, &truth, 2)
            );
        }
    }

    #[test]
    fn chance_kappa_cases() {
        let labels: Vec<Class> = (0..40).map(|i| if i % 2 == 0 { Y } else { N }).collect();
        let m = chance_kappa(&labels, 10_000, 7).unwrap();
        assert!(m.abs() <= 0.02, "{m}");
        assert_eq!(m, chance_kappa(&labels, 10_000, 7).unwrap());
        assert_eq!(chance_kappa(&[Y; 12], 100, 1).unwrap(), 0.0);
        assert_eq!(chance_kappa::<Class>(&[], 10, 1), Err(StatsError::EmptyInput));
    }

    fn trace(class: Class, probs: &[f64]) -> TrialTrace {
        TrialTrace {
            trial_id: 0,
            true_class: class,
            points: probs
                .iter()
                .enumerate()
                .map(|(i, &prob)| TracePoint {
                    t: 2.0 + i as f64,
                    prob,
                })
                .collect(),
            outcome: None,
        }
    }

    #[test]
    fn bar_dynamics_examples() {
        let probs = [0.5, 0.55, 0.6, 0.65, 0.7, 0.72, 0.71, 0.69, 0.66, 0.62];
        assert_eq!(bar_dynamics(&trace(Y, &probs)).unwrap(), 90.0);
        assert_eq!(bar_dynamics(&trace(N, &probs)).unwrap(), 0.0);
        assert_eq!(bar_dynamics(&trace(N, &[0.4, 0.1])).unwrap(), 100.0);
        assert_eq!(bar_dynamics(&trace(N, &[])), Err(StatsError::EmptyTrace));
    }

    #[test]
    fn hits_examples() {
        let yes_first = trace(Y, &[0.55, 0.61, 0.3]);
        let no_first = trace(Y, &[0.45, 0.4, 0.7]);
        let never = trace(Y, &[0.5, 0.55, 0.45]);
        assert_eq!(hits_at_threshold(&[yes_first.clone()], 0.6).unwrap(), 100.0);
        assert_eq!(hits_at_threshold(&[no_first], 0.6).unwrap(), 0.0);
        assert_eq!(hits_at_threshold(&[never.clone()], 0.6).unwrap(), 0.0);
        assert_eq!(hits_at_threshold(&[yes_first, never], 0.6).unwrap(), 50.0);
        assert_eq!(hits_at_threshold(&[], 0.6), Err(StatsError::EmptyInput));
    }

    #[test]
    fn latency_examples() {
        let mut probs = Vec::new();
        let mut p = 0.5f64;
        for _ in 0..10 {
            p = 0.95 * p + 0.05;
            probs.push(p);
        }
        assert_eq!(latency_to_correct_hit(&trace(Y, &probs), 0.6), Some(6.0));
        assert_eq!(latency_to_correct_hit(&trace(Y, &[0.5, 0.52]), 0.6), None);
        assert_eq!(latency_to_correct_hit(&trace(N, &[0.3]), 0.6), Some(2.0));
    }

    #[test]
    fn permutation_test_cases() {
        let same = vec![vec![2.0; 10]; 3];
        assert_eq!(channel_permutation_test(&same, &same, 200, 1).unwrap(), vec![1.0; 3]);

        let a = vec![vec![1.0; 100]];
        let b = vec![vec![0.0; 100]];
        let p = channel_permutation_test(&a, &b, 1000, 2).unwrap();
        assert_eq!(p, vec![0.0]);
        assert_eq!(format_p_value(p[0], 1000), "< 0.001");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ga: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..20).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let gb: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..25).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        assert_eq!(
            channel_permutation_test(&ga, &gb, 300, 9).unwrap(),
            channel_permutation_test(&ga, &gb, 300, 9).unwrap()
        );
        assert_eq!(
            channel_permutation_test(&[vec![1.0]], &[vec![1.0, 2.0]], 10, 1),
            Err(StatsError::TooFewSamples)
        );
    }

    /// Labeled frames: `per_trial[t]` frames for trial t, class from `classes[t]`,
    /// one channel with values from `value(t, frame)`.
    fn frames(classes: &[Class], per_trial: usize, value: impl Fn(usize, usize) -> f64) -> FeatureSet {
        let mut set = FeatureSet::default();
        for (t, &k) in classes.iter().enumerate() {
            for f in 0..per_trial {
                set.features.push(vec![0.0, value(t, f)]);
                set.labels.push(k);
                set.run_index.push(0);
                set.trial_index.push(t);
            }
        }
        set
    }

    #[test]
    fn trial_permutation_matches_exact_enumeration() {
        let classes = [Y, Y, Y, N, N, N];
        let v = [3.1, 2.4, 0.9, 1.7, 0.2, 1.1];
        let data = frames(&classes, 2, |t, f| v[t] + 0.1 * f as f64);
        let blocks = TrialBlocks::new(&data, Band::Beta, &["Cz".to_string()]).unwrap();
        // All C(6, 3) relabelings, each equally likely under a uniform shuffle.
        let observed = blocks.differences(&classes)[0].abs();
        let mut hits = 0;
        for mask in 0u32..64 {
            if mask.count_ones() != 3 {
                continue;
            }
            let labels: Vec<Class> = (0..6).map(|i| if mask >> i & 1 == 1 { Y } else { N }).collect();
            if blocks.differences(&labels)[0].abs() >= observed - 1e-12 {
                hits += 1;
            }
        }
        let exact = hits as f64 / 20.0;
        let p = trial_permutation_test(&blocks, 20_000, 4).unwrap()[0];
        assert!((p - exact).abs() < 0.015, "p {p}, exact {exact}");
    }

    #[test]
    fn trial_shuffling_keeps_nominal_level_with_shared_trial_offsets() {
        // Each trial carries a common random offset on all of its frames.
        let classes: Vec<Class> = (0..40).map(|t| if t % 2 == 0 { Y } else { N }).collect();
        let mut rejected_frame = 0;
        let mut rejected_trial = 0;
        let reps = 60;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + rep);
            let offsets: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise: Vec<f64> = (0..40 * 9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.1 * z
                })
                .collect();
            let data = frames(&classes, 9, |t, f| offsets[t] + noise[t * 9 + f]);
            let (a, b) = class_groups(&data, Band::Beta, 1);
            if channel_permutation_test(&a, &b, 200, rep).unwrap()[0] <= 0.05 {
                rejected_frame += 1;
            }
            let blocks = TrialBlocks::new(&data, Band::Beta, &["Cz".to_string()]).unwrap();
            if trial_permutation_test(&blocks, 200, rep).unwrap()[0] <= 0.05 {
                rejected_trial += 1;
            }
        }
        assert!(rejected_trial <= 9, "trial-level rejections {rejected_trial}/{reps}");
        assert!(
            rejected_frame > 2 * rejected_trial.max(3),
            "frame-level rejections {rejected_frame}/{reps}"
        );
    }

    #[test]
    fn trial_blocks_guards() {
        let data = frames(&[Y, N], 3, |_, _| 1.0);
        assert_eq!(
            TrialBlocks::new(&data, Band::Beta, &["Cz".to_string()]),
            Err(StatsError::TooFewSamples)
        );
        let mut mixed = frames(&[Y, Y, N, N], 2, |_, _| 1.0);
        mixed.labels[1] = N;
        assert_eq!(
            TrialBlocks::new(&mixed, Band::Beta, &["Cz".to_string()]),
            Err(StatsError::DegenerateLabels)
        );
    }

    /// Straight from the definition: for each i, min over j >= i of m p_(j) / j.
    fn bh_oracle(p: &[f64]) -> Vec<f64> {
        let m = p.len();
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(a.cmp(&b)));
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut best = f64::INFINITY;
            for j in i..m {
                best = best.min(m as f64 * p[idx[j]] / (j + 1) as f64);
            }
            out[idx[i]] = best.min(1.0);
        }
        out
    }

    #[test]
    fn bh_examples() {
        let adj = bh_correct(&[0.01, 0.04, 0.03, 0.02]).unwrap();
        assert!(adj.iter().all(|&v| (v - 0.04).abs() < 1e-15), "{adj:?}");
        let adj = bh_correct(&[0.005, 0.05, 0.5]).unwrap();
        for (a, e) in adj.iter().zip([0.015, 0.075, 0.5]) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(bh_correct(&[0.3]).unwrap(), vec![0.3]);
        assert_eq!(bh_correct(&[0.3, 1.2]), Err(StatsError::OutOfRange(1.2)));
    }

    #[test]
    fn bh_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let m = rng.random_range(1..40);
            let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(3)).collect();
            let ours = bh_correct(&p).unwrap();
            for (a, b) in ours.iter().zip(bh_oracle(&p)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn null_p_values_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = Vec::new();
        for rep in 0..200 {
            let a = vec![(0..15).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()];
            let b = vec![(0..15).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()];
            ps.push(channel_permutation_test(&a, &b, 400, rep).unwrap()[0]);
        }
        ps.sort_by(f64::total_cmp);
        let n = ps.len() as f64;
        let ks = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| ((i + 1) as f64 / n - p).abs().max((p - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.15, "KS {ks}");
    }

    fn labeled(rows: Vec<(Class, Vec<f64>)>) -> FeatureSet {
        let mut set = FeatureSet::default();
        for (i, (c, r)) in rows.into_iter().enumerate() {
            set.features.push(r);
            set.labels.push(c);
            set.run_index.push(0);
            set.trial_index.push(i);
            set.frame_end_s.push(0.0);
        }
        set
    }

    #[test]
    fn topo_difference_antisymmetric() {
        let names: Vec<String> = vec!["A".into(), "B".into()];
        let set = labeled(vec![
            (Y, vec![1.0, 2.0, 5.0, 1.0]),
            (Y, vec![1.5, 2.0, 6.0, 1.2]),
            (N, vec![1.0, 1.0, 1.0, 1.0]),
            (N, vec![0.5, 1.0, 2.0, 0.8]),
        ]);
        let d = topo_class_difference(&set, Band::Beta, &names).unwrap();
        assert_eq!(d[0].difference, 4.0);
        let mut swapped = set.clone();
        swapped.labels.iter_mut().for_each(|l| *l = l.opposite());
        let s = topo_class_difference(&swapped, Band::Beta, &names).unwrap();
        for (x, y) in d.iter().zip(&s) {
            assert_eq!(x.difference, -y.difference);
        }
        let one_class = labeled(vec![(Y, vec![1.0; 4]), (Y, vec![2.0; 4])]);
        assert_eq!(
            topo_class_difference(&one_class, Band::Alpha, &names),
            Err(StatsError::DegenerateLabels)
        );
    }

    #[test]
    fn topo_null_differences_are_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let names: Vec<String> = (0..8).map(|i| format!("C{i}")).collect();
        let rows = (0..400)
            .map(|i| {
                let c = if i % 2 == 0 { Y } else { N };
                (
                    c,
                    (0..16)
                        .map(|_| {
                            1.0 + 0.2 * {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                z
                            }
                        })
                        .collect(),
                )
            })
            .collect();
        let d = topo_class_difference(&labeled(rows), Band::Alpha, &names).unwrap();
        assert!(d.iter().all(|c| c.difference.abs() < 3.0 * c.std_error));
    }

    proptest! {
        #[test]
        fn kappa_self_agreement_and_relabeling(labels in proptest::collection::vec(0u8..3, 2..50)) {
            prop_assume!(labels.iter().any(|&l| l != labels[0]));
            prop_assert_eq!(cohen_kappa(&labels, &labels).unwrap().kappa, 1.0);
            let other: Vec<u8> = labels.iter().rev().cloned().collect();
            let base = cohen_kappa(&labels, &other).unwrap().kappa;
            let relabel = |v: &[u8]| v.iter().map(|&l| (l + 1) % 3).collect::<Vec<_>>();
            let renamed = cohen_kappa(&relabel(&labels), &relabel(&other)).unwrap().kappa;
            prop_assert!((base - renamed).abs() < 1e-12);
        }

        #[test]
        fn bar_dynamics_label_swap(probs in proptest::collection::vec(prop_oneof![Just(0.5), 0.0f64..=1.0], 1..40)) {
            let yes = bar_dynamics(&trace(Y, &probs)).unwrap();
            let no = bar_dynamics(&trace(N, &probs)).unwrap();
            let ties = 100.0 * probs.iter().filter(|&&p| p == 0.5).count() as f64 / probs.len() as f64;
            prop_assert!((0.0..=100.0).contains(&yes));
            prop_assert!((no - (100.0 - yes - ties)).abs() < 1e-9);
        }

        #[test]
        fn bh_monotone_and_idempotent(p in proptest::collection::vec(0.0f64..=1.0, 1..30)) {
            let adj = bh_correct(&p).unwrap();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
            for w in idx.windows(2) {
                prop_assert!(adj[w[1]] >= adj[w[0]]);
            }
            for (a, r) in adj.iter().zip(&p) {
                prop_assert!(a >= r && *a <= 1.0);
            }
            let twice = bh_correct(&adj).unwrap();
            for (a, b) in adj.iter().zip(&twice) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn hits_reach_full_marks_when_always_favoring_truth(eps in 0.001f64..0.05, n in 1usize..10) {
            let traces: Vec<TrialTrace> = (0..n)
                .map(|i| {
                    let class = if i % 2 == 0 { Y } else { N };
                    let p = if class == Y { 0.5 + 2.0 * eps } else { 0.5 - 2.0 * eps };
                    trace(class, &[p])
                })
                .collect();
            prop_assert_eq!(hits_at_threshold(&traces, 0.5 + eps).unwrap(), 100.0);
        }
    }
}
