use serde::{Deserialize, Serialize};

use super::table::PixelTable;
use crate::error::{Error, Result};

/// Added to the diagonal of the normal matrix when it is numerically singular.
pub const RIDGE_LAMBDA: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// True when the ridge fallback was needed.
    pub ridge: bool,
}

/// In-place Cholesky `A = L L^T` of a symmetric `n x n` row-major matrix;
/// `None` when a pivot is not safely positive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Ordinary least squares with intercept. The normal equations are formed on
/// centred columns, which leaves the solution unchanged and keeps the
/// intercept out of the conditioning.
pub fn mlr_fit(table: &PixelTable) -> Result<MlrModel> {
    let (n, d) = (table.len(), table.n_features());
    if n <= d {
        return Err(Error::Usage(format!("least squares needs more rows than features ({n} <= {d})")));
    }
    let y_mean = table.target_mean();
    let mut x_mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in x_mean.iter_mut().zip(table.row(i)) {
            *m += v;
        }
    }
    x_mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d];
    let mut centred = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centred.iter_mut().zip(table.row(i)).zip(&x_mean) {
            *c = v - m;
        }
        let yc = table.targets()[i] - y_mean;
        for a in 0..d {
            xty[a] += centred[a] * yc;
            for b in 0..=a {
                xtx[a * d + b] += centred[a] * centred[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[b * d + a] = xtx[a * d + b];
        }
    }
    let (l, ridge) = match cholesky(&xtx, d) {
        Some(l) => (l, false),
        None => {
            log::warn!("design matrix is rank deficient; adding ridge {RIDGE_LAMBDA}");
            let mut reg = xtx.clone();
            (0..d).for_each(|i| reg[i * d + i] += RIDGE_LAMBDA * n as f64);
            let l = cholesky(&reg, d)
                .ok_or_else(|| Error::Data("normal matrix is singular even after ridge".into()))?;
            (l, true)
        }
    };
    let coefficients = if d == 0 { Vec::new() } else { cholesky_solve(&l, d, &xty) };
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(c, m)| c * m).sum::<f64>();
    Ok(MlrModel {
        intercept,
        coefficients,
        ridge,
    })
}

impl MlrModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum::<f64>()
    }
}

/// `rows` is row-major with one row per query.
pub fn mlr_predict(model: &MlrModel, rows: &[f64]) -> Result<Vec<f64>> {
    let d = model.coefficients.len();
    if d == 0 || rows.len() % d != 0 {
        return Err(Error::Usage(format!("{} values do not form rows of {d} features", rows.len())));
    }
    Ok(rows.chunks(d).map(|r| model.predict_row(r)).collect())
}
