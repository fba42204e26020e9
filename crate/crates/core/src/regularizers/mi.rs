// SPDX-License-Identifier: MIT OR Apache-2.0

//! Histogram plug-in mutual information and a differentiable soft-binned variant.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// `bins` equal-width intervals over each column's observed range.
    #[default]
    EqualWidth,
    /// Bin edges at empirical quantiles, so marginals are near uniform.
    Quantile,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiScope {
    #[default]
    AllPairs,
    /// Only units `k..h`.
    NewOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMi {
    /// Column indices covered by `matrix`, in order.
    pub units: Vec<usize>,
    /// Symmetric, zero diagonal, nats.
    pub matrix: Array2<f64>,
    /// Sum over ordered pairs `i != j`.
    pub sum: f64,
}

/// Bin index of every entry of `col`.
pub fn bin_column<T: Scalar>(col: ArrayView1<T>, bins: usize, binning: Binning) -> Vec<usize> {
    let v: Vec<f64> = col.iter().map(|x| x.as_f64()).collect();
    match binning {
        Binning::EqualWidth => {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = hi - lo;
            v.iter()
                .map(|&x| {
                    if width <= 0.0 {
                        0
                    } else {
                        (((x - lo) / width * bins as f64) as usize).min(bins - 1)
                    }
                })
                .collect()
        }
        Binning::Quantile => {
            // Rank-based: ties share the bin of their first rank.
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
            let n = v.len().max(1);
            let mut out = vec![0; v.len()];
            let mut first_rank = 0;
            for (r, &i) in order.iter().enumerate() {
                if r == 0 || v[i] != v[order[r - 1]] {
                    first_rank = r;
                }
                out[i] = (first_rank * bins / n).min(bins - 1);
            }
            out
        }
    }
}

/// Plug-in MI of two binned variables, with `0 log 0 = 0`.
pub fn discrete_mi(a: &[usize], b: &[usize], bins_a: usize, bins_b: usize) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let mut joint = vec![0usize; bins_a * bins_b];
    let mut pa = vec![0usize; bins_a];
    let mut pb = vec![0usize; bins_b];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * bins_b + y] += 1;
        pa[x] += 1;
        pb[y] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for x in 0..bins_a {
        for y in 0..bins_b {
            let c = joint[x * bins_b + y];
            if c > 0 {
                let pxy = c as f64 / nf;
                mi += pxy * (pxy / (pa[x] as f64 / nf * pb[y] as f64 / nf)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Plug-in entropy of a discrete sample, nats.
pub fn discrete_entropy(a: &[usize], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &x in a {
        counts[x] += 1;
    }
    let n = a.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Histogram MI between every pair of columns in scope.
pub fn pairwise_mi_histogram<T: Scalar>(
    samples: ArrayView2<T>,
    bins: usize,
    binning: Binning,
    scope: MiScope,
    k: usize,
) -> Result<PairwiseMi> {
    if bins < 2 {
        return Err(CbmError::config("bins", "must be >= 2"));
    }
    let n = samples.nrows();
    if n < 10 * bins * bins {
        return Err(CbmError::Invalid(format!(
            "{n} samples is too few for {bins} bins (need >= {})",
            10 * bins * bins
        )));
    }
    let units: Vec<usize> = match scope {
        MiScope::AllPairs => (0..samples.ncols()).collect(),
        MiScope::NewOnly => {
            if k > samples.ncols() {
                return Err(CbmError::Invalid(format!("k = {k} exceeds width {}", samples.ncols())));
            }
            (k..samples.ncols()).collect()
        }
    };
    let binned: Vec<Vec<usize>> = units
        .iter()
        .map(|&u| bin_column(samples.column(u), bins, binning))
        .collect();
    let m = units.len();
    let mut matrix = Array2::zeros((m, m));
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let v = discrete_mi(&binned[i], &binned[j], bins, bins);
            matrix[[i, j]] = v;
            matrix[[j, i]] = v;
            sum += 2.0 * v;
        }
    }
    Ok(PairwiseMi { units, matrix, sum })
}

/// Largest pairwise histogram MI between any column of `a` and any column of `b`.
pub fn max_cross_mi<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, bins: usize, binning: Binning) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(CbmError::DimensionMismatch {
            expected: a.nrows(),
            actual: b.nrows(),
            context: "cross MI row count".into(),
        });
    }
    if a.nrows() < 10 * bins * bins {
        return Err(CbmError::Invalid(format!("too few samples for {bins} bins")));
    }
    let ba: Vec<Vec<usize>> = a.columns().into_iter().map(|c| bin_column(c, bins, binning)).collect();
    let bb: Vec<Vec<usize>> = b.columns().into_iter().map(|c| bin_column(c, bins, binning)).collect();
    let mut best = 0.0f64;
    for x in &ba {
        for y in &bb {
            best = best.max(discrete_mi(x, y, bins, bins));
        }
    }
    Ok(best)
}

/// Triangular-kernel bin weights of `u in [0, 1]` over `bins` centres and
/// their derivatives w.r.t. `u`. At most two weights are nonzero; they sum to 1.
fn soft_bins(u: f64, bins: usize) -> Vec<(usize, f64, f64)> {
    let scale = (bins - 1) as f64;
    let t = (u * scale).clamp(0.0, scale);
    let lo = (t.floor() as usize).min(bins - 2);
    let frac = t - lo as f64;
    vec![(lo, 1.0 - frac, -scale), (lo + 1, frac, scale)]
}

/// Soft-histogram MI summed over ordered pairs of `units`, with its gradient
/// w.r.t. `z`. Columns are min-max scaled per batch (the range is held
/// constant in the gradient); each value spreads linearly over its two
/// nearest bin centres, which makes the estimate piecewise smooth in `z`.
pub fn soft_pairwise_mi<T: Scalar>(z: ArrayView2<T>, units: &[usize], bins: usize) -> (f64, Array2<T>) {
    let n = z.nrows();
    let mut grad = Array2::<T>::zeros(z.raw_dim());
    if n == 0 || units.len() < 2 || bins < 2 {
        return (0.0, grad);
    }
    let nf = n as f64;
    // Per unit: soft bins per row, and d u / d z.
    let mut weights = Vec::with_capacity(units.len());
    let mut du_dz = Vec::with_capacity(units.len());
    for &u in units {
        let col: Vec<f64> = z.column(u).iter().map(|x| x.as_f64()).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = hi - lo;
        if width <= 0.0 {
            weights.push(col.iter().map(|_| vec![(0, 1.0, 0.0)]).collect::<Vec<_>>());
            du_dz.push(0.0);
        } else {
            weights.push(col.iter().map(|&x| soft_bins((x - lo) / width, bins)).collect());
            du_dz.push(1.0 / width);
        }
    }
    let mut total = 0.0;
    for a in 0..units.len() {
        for b in a + 1..units.len() {
            let mut p = vec![0.0; bins * bins];
            for row in 0..n {
                for &(i, wi, _) in &weights[a][row] {
                    for &(j, wj, _) in &weights[b][row] {
                        p[i * bins + j] += wi * wj / nf;
                    }
                }
            }
            let mut pa = vec![0.0; bins];
            let mut pb = vec![0.0; bins];
            for i in 0..bins {
                for j in 0..bins {
                    pa[i] += p[i * bins + j];
                    pb[j] += p[i * bins + j];
                }
            }
            let mut mi = 0.0;
            // d MI / d p_ij with marginals tied to p: log p_ij - log p_i - log p_j - 1.
            let mut dp = vec![0.0; bins * bins];
            for i in 0..bins {
                for j in 0..bins {
                    let v = p[i * bins + j];
                    if v > 0.0 {
                        let r = (v / (pa[i] * pb[j])).ln();
                        mi += v * r;
                        dp[i * bins + j] = r - 1.0;
                    }
                }
            }
            // Ordered pairs: (a, b) and (b, a) contribute equally.
            total += 2.0 * mi;
            for row in 0..n {
                let mut ga = 0.0;
                let mut gb = 0.0;
                for &(i, wi, dwi) in &weights[a][row] {
                    for &(j, wj, dwj) in &weights[b][row] {
                        let d = dp[i * bins + j] / nf;
                        ga += d * dwi * wj;
                        gb += d * wi * dwj;
                    }
                }
                grad[[row, units[a]]] += T::of(2.0 * ga * du_dz[a]);
                grad[[row, units[b]]] += T::of(2.0 * gb * du_dz[b]);
            }
        }
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniforms(n: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, cols), || rng.random::<f64>())
    }

    #[test]
    fn perfectly_correlated_binary_is_log2() {
        let z = Array2::from_shape_fn((100, 2), |(i, _)| (i % 2) as f64);
        let r = pairwise_mi_histogram(z.view(), 2, Binning::EqualWidth, MiScope::AllPairs, 0).unwrap();
        assert!((r.matrix[[0, 1]] - 2f64.ln()).abs() < 1e-12);
        assert!((r.sum - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn independent_uniforms_near_zero() {
        let z = uniforms(10_000, 3, 1);
        let r = pairwise_mi_histogram(z.view(), 16, Binning::EqualWidth, MiScope::AllPairs, 0).unwrap();
        for i in 0..3 {
            assert_eq!(r.matrix[[i, i]], 0.0);
            for j in 0..3 {
                assert_eq!(r.matrix[[i, j]], r.matrix[[j, i]]);
                assert!(r.matrix[[i, j]] < 0.05);
            }
        }
    }

    #[test]
    fn copy_reaches_log_bins() {
        let mut z = uniforms(10_000, 2, 2);
        let c0 = z.column(0).to_owned();
        z.column_mut(1).assign(&c0);
        for binning in [Binning::EqualWidth, Binning::Quantile] {
            let r = pairwise_mi_histogram(z.view(), 16, binning, MiScope::AllPairs, 0).unwrap();
            assert!(r.matrix[[0, 1]] >= 16f64.ln() - 0.2, "{binning:?}");
        }
    }

    #[test]
    fn bias_shrinks_with_n() {
        let small = uniforms(1_000, 2, 3);
        let large = uniforms(10_000, 2, 3);
        let mi = |z: &Array2<f64>| {
            pairwise_mi_histogram(z.view(), 8, Binning::EqualWidth, MiScope::AllPairs, 0)
                .unwrap()
                .sum
        };
        assert!(mi(&large) < mi(&small));
    }

    #[test]
    fn new_only_scope_and_sample_floor() {
        let z = uniforms(1_000, 4, 4);
        let r = pairwise_mi_histogram(z.view(), 4, Binning::EqualWidth, MiScope::NewOnly, 2).unwrap();
        assert_eq!(r.units, vec![2, 3]);
        assert!(pairwise_mi_histogram(z.view(), 16, Binning::EqualWidth, MiScope::AllPairs, 0).is_err());
    }

    #[test]
    fn soft_mi_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut z = Array2::from_shape_simple_fn((40, 3), || rng.random::<f64>());
        for r in 0..40 {
            z[[r, 1]] = 0.6 * z[[r, 0]] + 0.4 * z[[r, 1]];
        }
        let units = [0, 1, 2];
        let (_, g) = soft_pairwise_mi(z.view(), &units, 5);
        let h = 1e-6;
        let mut checked = 0;
        for r in 0..40 {
            for c in 0..3 {
                let col: Vec<f64> = z.column(c).to_vec();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                // The range endpoints and bin centres are kinks.
                let t = (z[[r, c]] - lo) / (hi - lo) * 4.0;
                if z[[r, c]] == lo || z[[r, c]] == hi || (t - t.round()).abs() < 1e-3 {
                    continue;
                }
                let mut zp = z.clone();
                zp[[r, c]] += h;
                let mut zm = z.clone();
                zm[[r, c]] -= h;
                let fd = (soft_pairwise_mi(zp.view(), &units, 5).0 - soft_pairwise_mi(zm.view(), &units, 5).0) / (2.0 * h);
                let err = (fd - g[[r, c]]).abs() / fd.abs().max(1e-3);
                assert!(err < 1e-4, "({r},{c}) fd {fd} analytic {}", g[[r, c]]);
                checked += 1;
            }
        }
        assert!(checked > 80);
    }

    #[test]
    fn soft_mi_tracks_dependence() {
        let ind = uniforms(2_000, 2, 6);
        let mut dep = ind.clone();
        let c0 = dep.column(0).to_owned();
        dep.column_mut(1).assign(&c0);
        let (a, _) = soft_pairwise_mi(ind.view(), &[0, 1], 8);
        let (b, _) = soft_pairwise_mi(dep.view(), &[0, 1], 8);
        assert!(a < 0.05 && b > 1.0, "{a} {b}");
    }
}
