// SPDX-License-Identifier: MIT OR Apache-2.0

//! Angular diversification and orthogonality over per-unit vector representations.

use ndarray::{Array2, ArrayView2};

use crate::error::{CbmError, Result};

/// Clamp applied to cosines before `arccos`.
pub const COS_CLAMP_EPS: f64 = 1e-6;

fn check(a: ArrayView2<f64>) -> Result<Vec<f64>> {
    if a.nrows() < 2 {
        return Err(CbmError::Invalid("need at least two vectors".into()));
    }
    let norms: Vec<f64> = a.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(CbmError::Invalid(format!("vector {i} has zero norm")));
    }
    Ok(norms)
}

/// `d cos(a_i, a_j) / d a_i`.
fn dcos(ai: &[f64], aj: &[f64], ni: f64, nj: f64, c: f64) -> Vec<f64> {
    ai.iter()
        .zip(aj)
        .map(|(&x, &y)| y / (ni * nj) - c * x / (ni * ni))
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AngularStats {
    pub mean_angle: f64,
    pub angle_variance: f64,
    /// `mean_angle - alpha * angle_variance`, to be maximised.
    pub value: f64,
}

/// Pairwise angles of the rows of `a` (one vector per unit). With
/// `abs_cos` the angle is taken on `|cos|`, so it lies in `[0, pi/2]`.
/// Returns the spread statistics and the gradient of `value` w.r.t. `a`.
pub fn angular_diversification(a: ArrayView2<f64>, alpha: f64, abs_cos: bool) -> Result<(AngularStats, Array2<f64>)> {
    let norms = check(a)?;
    let h = a.nrows();
    let mut pairs = Vec::new();
    for i in 0..h {
        for j in i + 1..h {
            let c = a.row(i).dot(&a.row(j)) / (norms[i] * norms[j]);
            let s = if abs_cos { c.abs() } else { c };
            let lim = 1.0 - COS_CLAMP_EPS;
            let clamped = s.abs() >= lim;
            let theta = s.clamp(-lim, lim).acos();
            pairs.push((i, j, c, theta, clamped));
        }
    }
    // Ordered-pair means equal unordered-pair means.
    let p = pairs.len() as f64;
    let mean = pairs.iter().map(|t| t.3).sum::<f64>() / p;
    let var = pairs.iter().map(|t| (t.3 - mean).powi(2)).sum::<f64>() / p;
    let value = mean - alpha * var;
    let mut grad = Array2::zeros(a.raw_dim());
    for &(i, j, c, theta, clamped) in &pairs {
        if clamped {
            continue;
        }
        let dv_dtheta = 1.0 / p - alpha * 2.0 * (theta - mean) / p;
        let s = if abs_cos { c.abs() } else { c };
        let dtheta_ds = -1.0 / (1.0 - s * s).sqrt();
        let ds_dc = if abs_cos { c.signum() } else { 1.0 };
        let k = dv_dtheta * dtheta_ds * ds_dc;
        let ai = a.row(i).to_vec();
        let aj = a.row(j).to_vec();
        for (col, v) in dcos(&ai, &aj, norms[i], norms[j], c).into_iter().enumerate() {
            grad[[i, col]] += k * v;
        }
        for (col, v) in dcos(&aj, &ai, norms[j], norms[i], c).into_iter().enumerate() {
            grad[[j, col]] += k * v;
        }
    }
    Ok((
        AngularStats {
            mean_angle: mean,
            angle_variance: var,
            value,
        },
        grad,
    ))
}

/// Training loss `-(mean angle - alpha * variance)` and its gradient.
pub fn angular_diversification_loss(a: ArrayView2<f64>, alpha: f64, abs_cos: bool) -> Result<(f64, Array2<f64>)> {
    let (stats, grad) = angular_diversification(a, alpha, abs_cos)?;
    Ok((-stats.value, -grad))
}

/// `sum_{i != j} cos^2(a_i, a_j)` over ordered pairs, and its gradient.
pub fn orthogonality_penalty(a: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let norms = check(a)?;
    let h = a.nrows();
    let mut total = 0.0;
    let mut grad = Array2::zeros(a.raw_dim());
    for i in 0..h {
        for j in i + 1..h {
            let c = a.row(i).dot(&a.row(j)) / (norms[i] * norms[j]);
            total += 2.0 * c * c;
            let k = 4.0 * c;
            let ai = a.row(i).to_vec();
            let aj = a.row(j).to_vec();
            for (col, v) in dcos(&ai, &aj, norms[i], norms[j], c).into_iter().enumerate() {
                grad[[i, col]] += k * v;
            }
            for (col, v) in dcos(&aj, &ai, norms[j], norms[i], c).into_iter().enumerate() {
                grad[[j, col]] += k * v;
            }
        }
    }
    Ok((total, grad))
}
