// SPDX-License-Identifier: MIT OR Apache-2.0

//! Saliency agreement between the oracle and trained target predictors.
//!
//! For each sample the oracle map is the attribution of the independent `f`
//! at the ground-truth concepts; each candidate map is the attribution of that
//! model's `f` at its own predicted concepts. Agreement is the coefficient of
//! determination with the oracle map as reference.

use ndarray::{ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionParams, Attributor, BaselineSpec, Method, SaliencyMap};
use crate::data::{ConceptDataset, TaskKind};
use crate::error::{CbmError, Result};
use crate::models::BottleneckModel;
use crate::probes::{mean_std, oracle_mode_warning};
use crate::scalar::Scalar;

/// `1 - SS_res / SS_tot` with `reference` supplying the mean and `SS_tot`.
/// A constant reference has no variance to explain and is an error.
pub fn saliency_r2(reference: ArrayView1<f64>, other: ArrayView1<f64>) -> Result<f64> {
    if reference.len() != other.len() {
        return Err(CbmError::DimensionMismatch {
            expected: reference.len(),
            actual: other.len(),
            context: "saliency map length".into(),
        });
    }
    let n = reference.len();
    if n == 0 {
        return Err(CbmError::Invalid("empty saliency maps".into()));
    }
    let mean = reference.sum() / n as f64;
    let ss_tot: f64 = reference.iter().map(|a| (a - mean).powi(2)).sum();
    // Relative threshold: maps that differ only by rounding count as constant.
    let scale = reference.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    if ss_tot <= (1e-12 * scale).powi(2) * n as f64 || ss_tot == 0.0 {
        return Err(CbmError::ConstantReference);
    }
    let ss_res: f64 = reference.iter().zip(other.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Ranks starting at 1, ties receiving their average rank.
fn ranks(v: ArrayView1<f64>) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Agreement of `other`'s maps with `reference`'s maps over the same samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAlignment {
    pub reference: String,
    pub other: String,
    pub n_samples: usize,
    /// Samples whose reference map was constant.
    pub n_skipped: usize,
    pub mean_r2: f64,
    /// Spread across samples.
    pub std_r2: f64,
    pub per_sample_r2: Vec<f64>,
    /// Rank agreement, reported alongside R²; `None` if never defined.
    pub mean_spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub params: AttributionParams,
    pub n_test_samples: usize,
    pub pairs: Vec<PairAlignment>,
}

impl AlignmentStats {
    pub fn pair(&self, reference: &str, other: &str) -> Option<&PairAlignment> {
        self.pairs
            .iter()
            .find(|p| p.reference == reference && p.other == other)
    }
}

/// Attribution settings used for alignment: integrated gradients from the
/// zero concept vector unless overridden.
pub fn default_alignment_params() -> AttributionParams {
    AttributionParams {
        method: Method::IntegratedGradients,
        baseline: BaselineSpec::zeros(),
        ..AttributionParams::default()
    }
}

fn attribution_index<T: Scalar>(task: TaskKind, y: T) -> usize {
    match task {
        TaskKind::Regression => 0,
        TaskKind::Classification => y.as_f64() as usize,
    }
}

fn compare(reference: (&str, &[SaliencyMap]), other: (&str, &[SaliencyMap])) -> Result<PairAlignment> {
    let mut r2 = Vec::with_capacity(reference.1.len());
    let mut rho = Vec::new();
    let mut skipped = 0;
    for (a, b) in reference.1.iter().zip(other.1) {
        match saliency_r2(a.values.view(), b.values.view()) {
            Ok(v) => r2.push(v),
            Err(CbmError::ConstantReference) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        }
        if let Some(s) = spearman(a.values.view(), b.values.view()) {
            rho.push(s);
        }
    }
    let (mean_r2, std_r2) = mean_std(&r2);
    Ok(PairAlignment {
        reference: reference.0.to_string(),
        other: other.0.to_string(),
        n_samples: r2.len(),
        n_skipped: skipped,
        mean_r2,
        std_r2,
        per_sample_r2: r2,
        mean_spearman: (!rho.is_empty()).then(|| mean_std(&rho).0),
    })
}

/// Concept-space saliency of the oracle (at ground-truth concepts, named
/// `"oracle"`) and of each candidate (at its own predicted concepts, named by
/// training mode), compared pairwise: oracle against every candidate, then
/// each candidate against every later one. The output index attributed is 0
/// for regression and the true class otherwise.
pub fn oracle_alignment<T: Scalar>(
    oracle: &BottleneckModel<T>,
    candidates: &[&BottleneckModel<T>],
    dataset: &ConceptDataset<T>,
    rows: &[usize],
    params: &AttributionParams,
) -> Result<AlignmentStats> {
    params.validate()?;
    if rows.is_empty() {
        return Err(CbmError::Split("alignment needs rows".into()));
    }
    let fp = dataset.fingerprint();
    for m in std::iter::once(&oracle).chain(candidates.iter()) {
        if m.dataset_fingerprint != fp {
            return Err(CbmError::Lineage(format!(
                "{} model was trained on dataset {}, not {fp}",
                m.mode.name(),
                m.dataset_fingerprint
            )));
        }
    }
    let ds = dataset.select(rows);
    let truth = ds.expanded_concepts();
    let width = truth.ncols();
    let attributor = Attributor::new(params, width, Some(truth.view()))?;
    let index = |i: usize| attribution_index(ds.task_kind, ds.targets[i]);
    let oracle_maps = truth
        .outer_iter()
        .enumerate()
        .map(|(i, c)| attributor.attribute(&oracle.f, c, index(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut named: Vec<(String, Vec<SaliencyMap>)> = Vec::with_capacity(candidates.len());
    for m in candidates {
        if m.f.input_dim() != width {
            return Err(CbmError::DimensionMismatch {
                expected: width,
                actual: m.f.input_dim(),
                context: format!("{} concept layer", m.mode.name()),
            });
        }
        let c_hat = m.predict_concepts(ds.inputs.view())?;
        let maps = c_hat
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(i, c)| attributor.attribute(&m.f, c, index(i)))
            .collect::<Result<Vec<_>>>()?;
        named.push((m.mode.name().to_string(), maps));
    }
    let mut pairs = Vec::new();
    for (name, maps) in &named {
        pairs.push(compare(("oracle", &oracle_maps), (name, maps))?);
    }
    for i in 0..named.len() {
        for j in i + 1..named.len() {
            pairs.push(compare((&named[i].0, &named[i].1), (&named[j].0, &named[j].1))?);
        }
    }
    Ok(AlignmentStats {
        params: params.clone(),
        n_test_samples: rows.len(),
        pairs,
    })
}

/// Models of one training seed.
pub struct SeedModels<'a, T> {
    pub seed: u64,
    pub independent: &'a BottleneckModel<T>,
    pub sequential: &'a BottleneckModel<T>,
    pub joint: &'a BottleneckModel<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAlignment {
    pub seed: u64,
    pub stats: AlignmentStats,
}

/// One model pair summarised over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAcrossSeeds {
    pub reference: String,
    pub other: String,
    /// Mean of per-seed means.
    pub mean_r2: f64,
    /// Spread of per-seed means.
    pub std_across_seeds: f64,
    /// Mean of per-seed across-sample spreads.
    pub mean_std_across_samples: f64,
    pub n_skipped: usize,
    pub mean_spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub params: AttributionParams,
    pub n_rows: usize,
    pub per_seed: Vec<SeedAlignment>,
    pub summary: Vec<PairAcrossSeeds>,
    pub warnings: Vec<String>,
}

impl AlignmentReport {
    pub fn pair(&self, reference: &str, other: &str) -> Option<&PairAcrossSeeds> {
        self.summary
            .iter()
            .find(|p| p.reference == reference && p.other == other)
    }

    /// Sequential agrees with the oracle better than joint does, on average.
    pub fn sequential_beats_joint(&self) -> Option<bool> {
        Some(self.pair("oracle", "sequential")?.mean_r2 > self.pair("oracle", "joint")?.mean_r2)
    }
}

/// Alignment of sequential and joint models against each seed's oracle.
pub fn oracle_alignment_report<T: Scalar>(
    runs: &[SeedModels<'_, T>],
    dataset: &ConceptDataset<T>,
    rows: &[usize],
    params: &AttributionParams,
) -> Result<AlignmentReport> {
    if runs.is_empty() {
        return Err(CbmError::config("seeds", "at least one seed is required"));
    }
    let mut warnings = Vec::new();
    let mut per_seed = Vec::with_capacity(runs.len());
    for run in runs {
        if let Some(w) = oracle_mode_warning(run.independent.mode) {
            warnings.push(format!("seed {}: {w}", run.seed));
        }
        let stats = oracle_alignment(
            run.independent,
            &[run.sequential, run.joint],
            dataset,
            rows,
            params,
        )?;
        per_seed.push(SeedAlignment { seed: run.seed, stats });
    }
    let summary = per_seed[0]
        .stats
        .pairs
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let of_seed = |f: fn(&PairAlignment) -> f64| -> Vec<f64> {
                per_seed.iter().map(|s| f(&s.stats.pairs[pi])).collect()
            };
            let (mean_r2, std_across_seeds) = mean_std(&of_seed(|p| p.mean_r2));
            let rho: Vec<f64> = per_seed
                .iter()
                .filter_map(|s| s.stats.pairs[pi].mean_spearman)
                .collect();
            PairAcrossSeeds {
                reference: p.reference.clone(),
                other: p.other.clone(),
                mean_r2,
                std_across_seeds,
                mean_std_across_samples: mean_std(&of_seed(|p| p.std_r2)).0,
                n_skipped: per_seed.iter().map(|s| s.stats.pairs[pi].n_skipped).sum(),
                mean_spearman: (!rho.is_empty()).then(|| mean_std(&rho).0),
            }
        })
        .collect();
    Ok(AlignmentReport {
        params: params.clone(),
        n_rows: rows.len(),
        per_seed,
        summary,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn r2_identical_is_one() {
        let a = array![1.0, -2.0, 0.5, 3.0];
        assert_eq!(saliency_r2(a.view(), a.view()).unwrap(), 1.0);
    }

    #[test]
    fn r2_against_mean_is_zero() {
        let a = array![1.0, 2.0, 3.0];
        let b = array![2.0, 2.0, 2.0];
        assert!(saliency_r2(a.view(), b.view()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn r2_fixture() {
        // mean 2, SS_tot 2, SS_res 0.25 + 0 + 0.25
        let a = array![1.0, 2.0, 3.0];
        let b = array![1.5, 2.0, 2.5];
        assert!((saliency_r2(a.view(), b.view()).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn r2_hand_fixture() {
        let a = array![1.0, 2.0, 3.0];
        let b = array![1.0, 2.0, 4.0];
        assert_eq!(saliency_r2(a.view(), b.view()).unwrap(), 0.5);
    }

    #[test]
    fn r2_constant_reference_rejected() {
        let a = array![0.0, 0.0];
        let b = array![1.0, 2.0];
        assert!(matches!(saliency_r2(a.view(), b.view()), Err(CbmError::ConstantReference)));
        assert!(saliency_r2(b.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn r2_is_asymmetric() {
        let a = array![0.0, 1.0, 2.0];
        let b = array![0.0, 2.0, 4.0];
        let ab = saliency_r2(a.view(), b.view()).unwrap();
        let ba = saliency_r2(b.view(), a.view()).unwrap();
        assert!((ab - ba).abs() > 0.1);
    }

    #[test]
    fn spearman_fixtures() {
        let a = array![1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(a.view(), array![10.0, 20.0, 30.0, 40.0].view()), Some(1.0));
        assert_eq!(spearman(a.view(), array![4.0, 3.0, 2.0, 1.0].view()), Some(-1.0));
        assert_eq!(spearman(a.view(), array![1.0, 1.0, 1.0, 1.0].view()), None);
        assert_eq!(ranks(array![5.0, 1.0, 5.0].view()), vec![2.5, 1.0, 2.5]);
    }

    proptest! {
        #[test]
        fn r2_at_most_one(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..20)) {
            let a: ndarray::Array1<f64> = v.iter().map(|p| p.0).collect();
            let b: ndarray::Array1<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(r) = saliency_r2(a.view(), b.view()) {
                prop_assert!(r <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn r2_invariant_to_joint_affine_shift(
            v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20),
            shift in -3.0f64..3.0,
        ) {
            let a: ndarray::Array1<f64> = v.iter().map(|p| p.0).collect();
            let b: ndarray::Array1<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(r) = saliency_r2(a.view(), b.view()) {
                let r2 = saliency_r2((&a + shift).view(), (&b + shift).view()).unwrap();
                prop_assert!((r - r2).abs() < 1e-6 * (1.0 + r.abs()));
            }
        }
    }
}
