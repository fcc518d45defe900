//! Platt scaling of decision scores.
//!
//! `P(Modulated | s) = 1 / (1 + exp(a*s + b))`, fit by Newton's method with
//! backtracking on the cross-entropy against smoothed targets
//! `(N+ + 1)/(N+ + 2)` and `1/(N- + 2)`.

use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::Class;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
}

impl Calibration {
    pub fn posterior(&self, score: f64) -> f64 {
        let t = self.a * score + self.b;
        // Evaluate on the side that cannot overflow.
        if t >= 0.0 {
            let e = (-t).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + t.exp())
        }
    }
}

pub fn fit_calibration(scores: &[f64], labels: &[Class]) -> Result<Calibration, TrainingError> {
    if scores.len() != labels.len() {
        return Err(TrainingError::LengthMismatch {
            rows: scores.len(),
            labels: labels.len(),
        });
    }
    let prior1 = labels.iter().filter(|&&l| l == Class::Modulated).count() as f64;
    let prior0 = labels.len() as f64 - prior1;
    if prior1 == 0.0 || prior0 == 0.0 {
        return Err(TrainingError::DegenerateLabels {
            modulated: prior1 as usize,
            baseline: prior0 as usize,
        });
    }
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let targets: Vec<f64> = labels
        .iter()
        .map(|&l| if l == Class::Modulated { hi } else { lo })
        .collect();

    const MAX_ITER: usize = 100;
    const MIN_STEP: f64 = 1e-10;
    const SIGMA: f64 = 1e-12;
    const EPS: f64 = 1e-5;

    // Negative log-likelihood written in the overflow-free form.
    let objective = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(&targets)
            .map(|(&s, &t)| {
                let f = s * a + b;
                if f >= 0.0 {
                    t * f + (1.0 + (-f).exp()).ln()
                } else {
                    (t - 1.0) * f + (1.0 + f.exp()).ln()
                }
            })
            .sum()
    };

    let mut a = 0.0;
    let mut b = ((prior0 + 1.0) / (prior1 + 1.0)).ln();
    let mut fval = objective(a, b);
    for _ in 0..MAX_ITER {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&s, &t) in scores.iter().zip(&targets) {
            let f = s * a + b;
            let (p, q) = if f >= 0.0 {
                let e = (-f).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = f.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += s * s * d2;
            h22 += d2;
            h21 += s * d2;
            let d1 = t - p;
            g1 += s * d1;
            g2 += d1;
        }
        if g1.abs() < EPS && g2.abs() < EPS {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut moved = false;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                moved = true;
                break;
            }
            step /= 2.0;
        }
        if !moved {
            break;
        }
    }
    Ok(Calibration { a, b })
}
