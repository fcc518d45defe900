//! L2-regularized hinge-loss linear classifier.
//!
//! Features are standardized with training statistics, then the primal
//!
//! ```text
//! min  0.5 * (|w|^2 + b^2) + C * sum_i max(0, 1 - y_i (w . z_i + b))
//! ```
//!
//! is solved through its dual by coordinate descent. The bias is handled as
//! a weight on a constant unit feature, so it is regularized like the rest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::Class;

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Population statistics; constant columns keep scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.len() as f64;
        let p = rows.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; p];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub regularization_c: f64,
    pub standardizer: Standardizer,
}

impl LinearModel {
    /// Signed distance-like score; positive favors Modulated.
    pub fn decision(&self, row: &[f64]) -> f64 {
        let mut s = self.bias;
        for (k, v) in row.iter().enumerate() {
            s += self.weights[k] * (v - self.standardizer.mean[k]) / self.standardizer.scale[k];
        }
        s
    }

    pub fn predict(&self, row: &[f64]) -> Class {
        if self.decision(row) > 0.0 {
            Class::Modulated
        } else {
            Class::Baseline
        }
    }

    /// Primal objective on already standardized rows.
    pub fn objective_standardized(&self, rows: &[Vec<f64>], labels: &[Class]) -> f64 {
        hinge_objective(&self.weights, self.bias, self.regularization_c, rows, labels)
    }
}

pub fn hinge_objective(w: &[f64], b: f64, c: f64, rows: &[Vec<f64>], labels: &[Class]) -> f64 {
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    let loss: f64 = rows
        .iter()
        .zip(labels)
        .map(|(x, y)| {
            let m = y.sign() * (x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b);
            (1.0 - m).max(0.0)
        })
        .sum();
    reg + c * loss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmSolverOptions {
    /// Stop when the spread of projected dual gradients falls below this.
    pub tolerance: f64,
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SvmSolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_passes: 20_000,
            seed: 0,
        }
    }
}

pub fn train_linear_svm(features: &[Vec<f64>], labels: &[Class], c: f64) -> Result<LinearModel, TrainingError> {
    train_linear_svm_with(features, labels, c, &SvmSolverOptions::default())
}

pub fn train_linear_svm_with(
    features: &[Vec<f64>],
    labels: &[Class],
    c: f64,
    options: &SvmSolverOptions,
) -> Result<LinearModel, TrainingError> {
    if features.len() != labels.len() {
        return Err(TrainingError::LengthMismatch {
            rows: features.len(),
            labels: labels.len(),
        });
    }
    let yes = labels.iter().filter(|&&l| l == Class::Modulated).count();
    if yes == 0 || yes == labels.len() {
        return Err(TrainingError::DegenerateLabels {
            modulated: yes,
            baseline: labels.len() - yes,
        });
    }
    if !(c > 0.0) {
        return Err(TrainingError::InvalidConfig(format!("C must be positive, got {c}")));
    }
    let standardizer = Standardizer::fit(features);
    let z: Vec<Vec<f64>> = features.iter().map(|r| standardizer.transform(r)).collect();
    let (weights, bias) = dual_coordinate_descent(&z, labels, c, options);
    Ok(LinearModel {
        weights,
        bias,
        regularization_c: c,
        standardizer,
    })
}

fn dual_coordinate_descent(rows: &[Vec<f64>], labels: &[Class], c: f64, options: &SvmSolverOptions) -> (Vec<f64>, f64) {
    let n = rows.len();
    let p = rows[0].len();
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let y: Vec<f64> = labels.iter().map(|l| l.sign()).collect();
    // Squared norm of each augmented row (features plus the unit bias input).
    let q_diag: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    for _ in 0..options.max_passes {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let xi = &rows[i];
            let g = y[i] * (xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q_diag[i]).clamp(0.0, c);
                let d = (alpha[i] - old) * y[i];
                if d != 0.0 {
                    for (wk, xk) in w.iter_mut().zip(xi) {
                        *wk += d * xk;
                    }
                    b += d;
                }
            }
        }
        if pg_max - pg_min < options.tolerance {
            break;
        }
    }
    (w, b)
}
