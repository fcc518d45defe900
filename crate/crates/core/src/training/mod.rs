//! Subject-specific decoder training.
//!
//! 1. Leave-one-run-out folds × `n_iterations` re-seeded tree ensembles give
//!    OOB permutation importances; their ranks are averaged and the 20 best
//!    features kept.
//! 2. For K = 20 down to 4, the leave-one-run-out accuracy of a linear
//!    hinge-loss classifier on the top-K features picks K* (ties go to the
//!    smaller K).
//! 3. A final classifier is trained on every offline frame, and a logistic
//!    calibration is fit to out-of-fold decision scores.

pub mod calibration;
pub mod forest;
pub mod svm;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibration::{fit_calibration, Calibration};
pub use forest::{
    oob_importance, ranks_descending, train_bagged_trees, EnsembleConfig, Permutation, RankAggregation, TreeEnsemble,
};
pub use svm::{train_linear_svm, LinearModel, Standardizer};

use crate::dataset::{
    self, DatasetError, EpochParams, FeatureIndex, FeatureSet, LoadedRun, TrainedDecoderFile, MAX_SELECTED_FEATURES,
    MIN_SELECTED_FEATURES,
};
use crate::metrics;
use crate::{Class, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("need both classes (modulated {modulated}, baseline {baseline})")]
    DegenerateLabels { modulated: usize, baseline: usize },
    #[error("{rows} feature rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("every tree has an empty out-of-bag set")]
    EmptyOob,
    #[error("leave-one-run-out needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Splitmix-style seed derivation so each (fold, iteration) gets its own
/// reproducible stream regardless of execution order.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    /// Mean rank per feature over all importance vectors (1 = best).
    pub mean_rank: Vec<f64>,
    /// Mean normalized importance per feature.
    pub mean_importance: Vec<f64>,
    pub aggregation: RankAggregation,
    /// Best features first.
    pub top: Vec<usize>,
    pub n_vectors: usize,
}

fn check_runs(data: &FeatureSet) -> Result<Vec<usize>, TrainingError> {
    let runs = data.runs();
    if runs.len() < 2 {
        return Err(TrainingError::TooFewRuns(runs.len()));
    }
    Ok(runs)
}

pub const TOP_FEATURES: usize = MAX_SELECTED_FEATURES;

pub fn select_top_features(data: &FeatureSet, config: &EnsembleConfig) -> Result<ImportanceRanking, TrainingError> {
    config.validate()?;
    let runs = check_runs(data)?;
    let jobs: Vec<(usize, usize)> = (0..runs.len())
        .flat_map(|f| (0..config.n_iterations).map(move |it| (f, it)))
        .collect();
    let vectors: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(fold, it)| {
            let held_out = runs[fold];
            let train = data.select_runs(|r| r != held_out);
            let seed = derive_seed(config.seed, fold as u64, it as u64);
            let ensemble = train_bagged_trees(
                &train.features,
                &train.labels,
                &EnsembleConfig { seed, ..config.clone() },
            )?;
            oob_importance(
                &ensemble,
                &train.features,
                &train.labels,
                Permutation::Shuffle {
                    seed: seed.wrapping_add(1),
                },
            )
        })
        .collect::<Result<_, _>>()?;

    let p = data.n_features();
    let n = vectors.len() as f64;
    let mut mean_rank = vec![0.0; p];
    let mut mean_importance = vec![0.0; p];
    for v in &vectors {
        for (m, r) in mean_rank.iter_mut().zip(ranks_descending(v)) {
            *m += r;
        }
        for (m, x) in mean_importance.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean_rank.iter_mut().for_each(|m| *m /= n);
    mean_importance.iter_mut().for_each(|m| *m /= n);
    let mut order: Vec<usize> = (0..p).collect();
    match config.aggregation {
        RankAggregation::MeanRank => order.sort_by(|&a, &b| mean_rank[a].total_cmp(&mean_rank[b]).then(a.cmp(&b))),
        RankAggregation::MeanImportance => {
            order.sort_by(|&a, &b| mean_importance[b].total_cmp(&mean_importance[a]).then(a.cmp(&b)))
        }
    }
    order.truncate(TOP_FEATURES.min(p));
    Ok(ImportanceRanking {
        mean_rank,
        mean_importance,
        aggregation: config.aggregation,
        top: order,
        n_vectors: vectors.len(),
    })
}

fn project(rows: &[Vec<f64>], columns: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| columns.iter().map(|&j| r[j]).collect()).collect()
}

/// Out-of-fold decision scores for every row, one fold per run.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub scores: Vec<f64>,
    pub fold_accuracy: Vec<f64>,
}

impl CrossValidation {
    pub fn mean_accuracy(&self) -> f64 {
        self.fold_accuracy.iter().sum::<f64>() / self.fold_accuracy.len() as f64
    }

    pub fn predictions(&self) -> Vec<Class> {
        self.scores
            .iter()
            .map(|&s| if s > 0.0 { Class::Modulated } else { Class::Baseline })
            .collect()
    }
}

pub fn cross_validate(data: &FeatureSet, columns: &[usize], c: f64) -> Result<CrossValidation, TrainingError> {
    let runs = check_runs(data)?;
    let projected = project(&data.features, columns);
    let folds: Vec<(Vec<(usize, f64)>, f64)> = runs
        .par_iter()
        .map(|&held_out| {
            let (mut train_x, mut train_y, mut test) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..data.len() {
                if data.run_index[i] == held_out {
                    test.push(i);
                } else {
                    train_x.push(projected[i].clone());
                    train_y.push(data.labels[i]);
                }
            }
            let model = train_linear_svm(&train_x, &train_y, c)?;
            let scored: Vec<(usize, f64)> = test.iter().map(|&i| (i, model.decision(&projected[i]))).collect();
            let correct = scored
                .iter()
                .filter(|&&(i, s)| (s > 0.0) == (data.labels[i] == Class::Modulated))
                .count();
            let acc = if test.is_empty() {
                0.0
            } else {
                correct as f64 / test.len() as f64
            };
            Ok((scored, acc))
        })
        .collect::<Result<_, TrainingError>>()?;
    let mut scores = vec![0.0; data.len()];
    let mut fold_accuracy = Vec::with_capacity(folds.len());
    for (scored, acc) in folds {
        for (i, s) in scored {
            scores[i] = s;
        }
        fold_accuracy.push(acc);
    }
    Ok(CrossValidation { scores, fold_accuracy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub k_star: usize,
    pub selected: Vec<usize>,
    /// `(K, mean leave-one-run-out accuracy)` from K = 20 down to 4.
    pub accuracy_by_k: Vec<(usize, f64)>,
}

pub fn sweep_feature_count(
    ranking: &ImportanceRanking,
    data: &FeatureSet,
    c: f64,
) -> Result<SweepResult, TrainingError> {
    check_runs(data)?;
    let max_k = ranking.top.len().min(MAX_SELECTED_FEATURES);
    if max_k < MIN_SELECTED_FEATURES {
        return Err(TrainingError::InvalidConfig(format!(
            "ranking has only {max_k} features"
        )));
    }
    let ks: Vec<usize> = (MIN_SELECTED_FEATURES..=max_k).rev().collect();
    let accuracy_by_k: Vec<(usize, f64)> = ks
        .iter()
        .map(|&k| Ok((k, cross_validate(data, &ranking.top[..k], c)?.mean_accuracy())))
        .collect::<Result<_, TrainingError>>()?;
    let best = accuracy_by_k.iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
    // Smallest K reaching the best accuracy.
    let k_star = accuracy_by_k
        .iter()
        .filter(|&&(_, a)| a >= best - 1e-12)
        .map(|&(k, _)| k)
        .min()
        .expect("at least one K evaluated");
    Ok(SweepResult {
        k_star,
        selected: ranking.top[..k_star].to_vec(),
        accuracy_by_k,
    })
}

/// Which decision scores the calibration is fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationScores {
    OutOfFold,
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub ensemble: EnsembleConfig,
    pub regularization_c: f64,
    pub preprocessing: EpochParams,
    pub calibration_scores: CalibrationScores,
}

impl TrainingConfig {
    pub fn standard(sample_rate_hz: f64, seed: u64) -> Self {
        Self {
            ensemble: EnsembleConfig {
                seed,
                ..Default::default()
            },
            regularization_c: 1.0,
            preprocessing: EpochParams::standard(sample_rate_hz),
            calibration_scores: CalibrationScores::OutOfFold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub n_runs: usize,
    pub n_frames: usize,
    pub ranking: ImportanceRanking,
    pub sweep: SweepResult,
    pub cv_accuracy: f64,
    pub cv_kappa: f64,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDecoder {
    pub decoder: TrainedDecoderFile,
    pub report: TrainingReport,
}

/// Full pipeline on already epoched frames.
pub fn train_from_features(
    data: &FeatureSet,
    channel_names: &[String],
    sample_rate_hz: f64,
    config: &TrainingConfig,
) -> Result<TrainedDecoder, TrainingError> {
    let ranking = select_top_features(data, &config.ensemble)?;
    let c = config.regularization_c;
    let sweep = sweep_feature_count(&ranking, data, c)?;
    let cv = cross_validate(data, &sweep.selected, c)?;
    let projected = project(&data.features, &sweep.selected);
    let model = train_linear_svm(&projected, &data.labels, c)?;
    let calibration = match config.calibration_scores {
        CalibrationScores::OutOfFold => fit_calibration(&cv.scores, &data.labels)?,
        CalibrationScores::Training => {
            let scores: Vec<f64> = projected.iter().map(|r| model.decision(r)).collect();
            fit_calibration(&scores, &data.labels)?
        }
    };
    let cv_kappa = metrics::cohen_kappa(&cv.predictions(), &data.labels)
        .map(|k| k.kappa)
        .unwrap_or(0.0);
    let channels = channel_names.len();
    let decoder = TrainedDecoderFile {
        schema_version: SCHEMA_VERSION,
        channel_names: channel_names.to_vec(),
        sample_rate_hz,
        preprocessing: config.preprocessing.clone(),
        selected_features: sweep
            .selected
            .iter()
            .map(|&j| FeatureIndex::from_flat(j, channels))
            .collect(),
        feature_mean: model.standardizer.mean.clone(),
        feature_scale: model.standardizer.scale.clone(),
        svm_weights: model.weights.clone(),
        svm_bias: model.bias,
        regularization_c: c,
        calibration_a: calibration.a,
        calibration_b: calibration.b,
        seed: config.ensemble.seed,
    };
    decoder.validate()?;
    Ok(TrainedDecoder {
        decoder,
        report: TrainingReport {
            n_runs: data.runs().len(),
            n_frames: data.len(),
            ranking,
            cv_accuracy: cv.mean_accuracy(),
            cv_kappa,
            sweep,
            calibration,
        },
    })
}

/// Epochs the offline runs and trains a decoder.
pub fn train_decoder(runs: &[LoadedRun], config: &TrainingConfig) -> Result<TrainedDecoder, TrainingError> {
    if runs.len() < 2 {
        return Err(TrainingError::TooFewRuns(runs.len()));
    }
    let first = &runs[0].recording;
    if let Some(bad) = runs.iter().find(|r| {
        r.recording.channel_names != first.channel_names || r.recording.sample_rate_hz != first.sample_rate_hz
    }) {
        return Err(TrainingError::InvalidConfig(format!(
            "run {} has a different montage or sample rate",
            bad.manifest.run_id
        )));
    }
    let data = dataset::epoch_runs(runs, &config.preprocessing)?;
    train_from_features(&data, &first.channel_names, first.sample_rate_hz, config)
}
