//! Ordinary least squares on the scaled feature vector.

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// Ridge added to the normal matrix when it is not positive definite.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub intercept: f64,
    pub weights: Vec<f64>,
    /// Whether the ridge fallback was needed.
    pub regularized: bool,
}

/// In-place Cholesky factorization; `None` when a pivot is not clearly positive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
    let tol = 1e-12 * max_diag.max(1.0);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= tol {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

impl LinearBaseline {
    /// Fits `y ≈ b0 + w·x`. Needs more rows than features.
    pub fn fit(rows: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let f = rows.first().map_or(0, Vec::len);
        if rows.len() != y.len() {
            return Err(TrainError::Config(format!(
                "{} rows but {} targets",
                rows.len(),
                y.len()
            )));
        }
        if rows.len() < f + 1 || f == 0 {
            return Err(TrainError::Config(format!(
                "baseline needs at least {} rows for {f} features, got {}",
                f + 1,
                rows.len()
            )));
        }
        if rows.iter().any(|r| r.len() != f) {
            return Err(TrainError::Config("ragged feature rows".into()));
        }
        let n = f + 1;
        let mut xtx = vec![0.0; n * n];
        let mut xty = vec![0.0; n];
        let mut aug = vec![1.0; n];
        for (r, &t) in rows.iter().zip(y) {
            aug[1..].copy_from_slice(r);
            for i in 0..n {
                xty[i] += aug[i] * t;
                for j in 0..n {
                    xtx[i * n + j] += aug[i] * aug[j];
                }
            }
        }
        let (l, regularized) = match cholesky(&xtx, n) {
            Some(l) => (l, false),
            None => {
                let mut ridge = xtx.clone();
                for i in 0..n {
                    ridge[i * n + i] += RIDGE_FALLBACK;
                }
                let l = cholesky(&ridge, n)
                    .ok_or_else(|| TrainError::Config("baseline normal equations are singular".into()))?;
                (l, true)
            }
        };
        let beta = cholesky_solve(&l, n, &xty);
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Config("baseline solution is not finite".into()));
        }
        Ok(Self {
            intercept: beta[0],
            weights: beta[1..].to_vec(),
            regularized,
        })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}
