// SPDX-License-Identifier: MIT OR Apache-2.0

//! Oracle, single-concept and intervention probes of concept faithfulness.
//!
//! The oracle feeds ground-truth concepts to an independently trained `f`.
//! Single-concept sweeps compare bottlenecks that are given one concept at a
//! time; an accurate model built on a single concept is evidence that the
//! concept layer carries information the concept does not explain.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptDataset, DataSplit, Encoding};
use crate::error::{CbmError, Result};
use crate::models::{
    default_lambda, train_independent_and_sequential, train_joint, BottleneckModel, TrainConfig,
    TrainingMode,
};
use crate::scalar::Scalar;

/// Text of the warning raised when an oracle is built on a non-independent `f`.
pub fn oracle_mode_warning(mode: TrainingMode) -> Option<String> {
    (mode != TrainingMode::Independent).then(|| {
        format!(
            "oracle uses an f trained in {} mode; only an independently trained f \
             has seen ground-truth concepts",
            mode.name()
        )
    })
}

/// `f(c_true)`. Emits a warning on stderr unless `f` was trained independently.
pub fn oracle_predict<T: Scalar>(
    model: &BottleneckModel<T>,
    c_true: ArrayView2<T>,
) -> Result<Array2<T>> {
    if let Some(w) = oracle_mode_warning(model.mode) {
        eprintln!("warning: {w}");
    }
    model.predict_target_from_concepts(c_true)
}

/// `f(c')` where `c'` is `g(x)` with the listed groups overwritten by truth.
///
/// `c_true` holds expanded ground-truth concepts (width `k_expanded`). Extra
/// unsupervised units are never overwritten.
pub fn intervene<T: Scalar>(
    model: &BottleneckModel<T>,
    x: ArrayView2<T>,
    c_true: ArrayView2<T>,
    groups: &[usize],
) -> Result<Array2<T>> {
    let k = model.schema.k_expanded();
    if c_true.ncols() != k {
        return Err(CbmError::DimensionMismatch {
            expected: k,
            actual: c_true.ncols(),
            context: "intervention concept width".into(),
        });
    }
    if c_true.nrows() != x.nrows() {
        return Err(CbmError::DimensionMismatch {
            expected: x.nrows(),
            actual: c_true.nrows(),
            context: "intervention rows".into(),
        });
    }
    let kg = model.schema.k_groups();
    if let Some(&bad) = groups.iter().find(|&&g| g >= kg) {
        return Err(CbmError::Invalid(format!(
            "intervention group index {bad} out of range (k = {kg})"
        )));
    }
    let mut c = model.predict_concepts(x)?;
    for &g in groups {
        let r = model.schema.slice(g);
        c.slice_mut(s![.., r.clone()]).assign(&c_true.slice(s![.., r]));
    }
    model.predict_target_from_concepts(c.view())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "order")]
pub enum InterventionOrdering {
    /// A fresh permutation of the groups for every seed.
    Random,
    /// Groups in exactly this order (every group once).
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of groups intervened on.
    pub m: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub mode: TrainingMode,
    pub ordering: InterventionOrdering,
    pub seeds: Vec<u64>,
    /// Group order actually used for each seed.
    pub orders: Vec<Vec<usize>>,
    /// `m = 0..=k`; the error metric is the model's target error.
    pub points: Vec<CurvePoint>,
}

/// Target error as the first `m` groups of each ordering are corrected.
/// Point `m = 0` equals the unintervened error.
pub fn intervention_curve<T: Scalar>(
    model: &BottleneckModel<T>,
    dataset: &ConceptDataset<T>,
    rows: &[usize],
    ordering: &InterventionOrdering,
    seeds: &[u64],
) -> Result<InterventionCurve> {
    if rows.is_empty() {
        return Err(CbmError::Split("intervention curve needs rows".into()));
    }
    if seeds.is_empty() {
        return Err(CbmError::config("seeds", "at least one seed is required"));
    }
    let kg = model.schema.k_groups();
    if let InterventionOrdering::Fixed(order) = ordering {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..kg).collect::<Vec<_>>() {
            return Err(CbmError::config(
                "ordering",
                format!("fixed ordering must be a permutation of 0..{kg}"),
            ));
        }
    }
    let ds = dataset.select(rows);
    let truth = ds.expanded_concepts();
    let orders: Vec<Vec<usize>> = seeds
        .iter()
        .map(|&seed| match ordering {
            InterventionOrdering::Fixed(o) => o.clone(),
            InterventionOrdering::Random => {
                let mut o: Vec<usize> = (0..kg).collect();
                o.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                o
            }
        })
        .collect();
    let mut per_m = vec![Vec::with_capacity(seeds.len()); kg + 1];
    for order in &orders {
        for (m, errs) in per_m.iter_mut().enumerate() {
            let out = intervene(model, ds.inputs.view(), truth.view(), &order[..m])?;
            errs.push(model.target_error(out.view(), ds.targets.view()));
        }
    }
    let points = per_m
        .into_iter()
        .enumerate()
        .map(|(m, per_seed)| {
            let (mean_error, std_error) = mean_std(&per_seed);
            CurvePoint { m, mean_error, std_error, per_seed }
        })
        .collect();
    Ok(InterventionCurve {
        mode: model.mode,
        ordering: ordering.clone(),
        seeds: seeds.to_vec(),
        orders,
        points,
    })
}

/// Population mean and standard deviation; `(NaN, NaN)` when empty.
pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Bottleneck width used for single-concept models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepWidth {
    /// One unit per concept group.
    #[default]
    Scalar,
    /// One unit per category (one-hot encoding).
    Cardinality,
}

impl SweepWidth {
    fn encoding(self) -> Encoding {
        match self {
            SweepWidth::Scalar => Encoding::Scalar,
            SweepWidth::Cardinality => Encoding::OneHot,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub train: TrainConfig,
    /// Joint concept weight; the task default when absent.
    pub lambda: Option<f64>,
    pub width: SweepWidth,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Test error per successful seed.
    pub values: Vec<f64>,
    /// `(seed, message)` for runs that failed.
    pub failures: Vec<(u64, String)>,
}

impl SweepCell {
    fn from_runs(runs: Vec<(u64, std::result::Result<f64, String>)>) -> Self {
        let mut values = Vec::new();
        let mut failures = Vec::new();
        for (seed, r) in runs {
            match r {
                Ok(v) => values.push(v),
                Err(e) => failures.push((seed, e)),
            }
        }
        let (m, sd) = mean_std(&values);
        let ok = !values.is_empty();
        Self {
            mean: ok.then_some(m),
            std: ok.then_some(sd),
            values,
            failures,
        }
    }

    pub fn failed(&self) -> bool {
        self.mean.is_none()
    }
}

pub const SWEEP_ROWS: [&str; 4] = ["joint", "sequential", "independent", "oracle"];

/// Test target error for each model kind (rows) given one concept group or
/// all of them (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<String>,
    /// Concept names followed by `"all"`.
    pub columns: Vec<String>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<SweepCell>>,
    pub width: SweepWidth,
    pub lambda: f64,
    pub seeds: Vec<u64>,
}

impl SweepTable {
    pub fn cell(&self, row: &str, column: &str) -> Option<&SweepCell> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(&self.cells[r][c])
    }

    pub fn all_column(&self) -> usize {
        self.columns.len() - 1
    }
}

/// Errors `[joint, sequential, independent, oracle]` for one concept subset
/// and one seed.
fn sweep_run<T: Scalar>(
    ds: &ConceptDataset<T>,
    split: &DataSplit,
    cfg: &TrainConfig,
    lambda: f64,
) -> [std::result::Result<f64, String>; 4] {
    let test = ds.select(&split.test);
    let err = |m: &Result<BottleneckModel<T>>| -> std::result::Result<f64, String> {
        let m = m.as_ref().map_err(|e| e.to_string())?;
        let metrics = m.evaluate(ds, &split.test).map_err(|e| e.to_string())?;
        Ok(metrics.target_rmse.or(metrics.target_error_rate).unwrap_or(f64::NAN))
    };
    let joint = train_joint(ds, split, lambda, cfg);
    let pair = train_independent_and_sequential(ds, split, cfg);
    let (ind, seq) = match pair {
        Ok((i, s)) => (Ok(i), Ok(s)),
        Err(e) => {
            let msg = e.to_string();
            (Err(CbmError::Invalid(msg.clone())), Err(CbmError::Invalid(msg)))
        }
    };
    let oracle = ind.as_ref().map_err(|e| e.to_string()).and_then(|m| {
        let out = m
            .predict_target_from_concepts(test.expanded_concepts().view())
            .map_err(|e| e.to_string())?;
        Ok(m.target_error(out.view(), test.targets.view()))
    });
    [err(&joint), err(&seq), err(&ind), oracle]
}

/// Train every model kind on each single concept group and on all groups,
/// for every seed in `cfg.seeds`. Failed runs are recorded per cell rather
/// than aborting the sweep.
pub fn single_concept_sweep<T: Scalar>(
    dataset: &ConceptDataset<T>,
    split: &DataSplit,
    cfg: &SweepConfig,
) -> Result<SweepTable> {
    cfg.train.validate()?;
    split.validate(dataset.len())?;
    if cfg.seeds.is_empty() {
        return Err(CbmError::config("seeds", "at least one seed is required"));
    }
    if split.test.is_empty() {
        return Err(CbmError::Split("sweep needs a non-empty test split".into()));
    }
    let base = dataset.with_encoding(cfg.width.encoding());
    let lambda = cfg
        .lambda
        .unwrap_or_else(|| default_lambda(&base.schema, base.task_kind));
    let kg = base.schema.k_groups();
    let mut subsets: Vec<Vec<usize>> = (0..kg).map(|g| vec![g]).collect();
    subsets.push((0..kg).collect());
    let mut columns: Vec<String> = base.schema.groups().iter().map(|g| g.name.clone()).collect();
    columns.push("all".into());

    let mut cells: Vec<Vec<SweepCell>> = vec![Vec::new(); SWEEP_ROWS.len()];
    for subset in &subsets {
        let ds = base.with_groups(subset)?;
        let mut runs: Vec<Vec<(u64, std::result::Result<f64, String>)>> =
            vec![Vec::new(); SWEEP_ROWS.len()];
        for &seed in &cfg.seeds {
            let res = sweep_run(&ds, split, &cfg.train.clone().with_seed(seed), lambda);
            for (row, r) in res.into_iter().enumerate() {
                runs[row].push((seed, r));
            }
        }
        for (row, r) in runs.into_iter().enumerate() {
            cells[row].push(SweepCell::from_runs(r));
        }
    }
    Ok(SweepTable {
        rows: SWEEP_ROWS.iter().map(|s| s.to_string()).collect(),
        columns,
        cells,
        width: cfg.width,
        lambda,
        seeds: cfg.seeds.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_dataset;
    use crate::models::train_independent;
    use crate::synth::{generate_task, SyntheticSpec};

    fn setup() -> (ConceptDataset<f64>, DataSplit, BottleneckModel<f64>) {
        let task = generate_task::<f64>(&SyntheticSpec::leaky(12, 2, 300, 0.3, 3), 3).unwrap();
        let split = split_dataset(&task.dataset, (0.6, 0.2, 0.2), 1).unwrap();
        let cfg = TrainConfig {
            g_hidden: vec![16],
            f_hidden: vec![8],
            epochs: 4,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let m = train_independent(&task.dataset, &split, &cfg).unwrap();
        (task.dataset, split, m)
    }

    #[test]
    fn empty_intervention_is_identity() {
        let (ds, split, m) = setup();
        let t = ds.select(&split.test);
        let a = intervene(&m, t.inputs.view(), t.expanded_concepts().view(), &[]).unwrap();
        let b = m.predict_end_to_end(t.inputs.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_intervention_equals_oracle() {
        let (ds, split, m) = setup();
        let t = ds.select(&split.test);
        let c = t.expanded_concepts();
        let a = intervene(&m, t.inputs.view(), c.view(), &[0, 1]).unwrap();
        let b = oracle_predict(&m, c.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_group_rejected() {
        let (ds, split, m) = setup();
        let t = ds.select(&split.test);
        let r = intervene(&m, t.inputs.view(), t.expanded_concepts().view(), &[2]);
        assert!(r.unwrap_err().is_validation());
    }

    #[test]
    fn curve_starts_at_unintervened_error() {
        let (ds, split, m) = setup();
        let curve =
            intervention_curve(&m, &ds, &split.test, &InterventionOrdering::Random, &[0, 1, 2]).unwrap();
        let base = m.evaluate(&ds, &split.test).unwrap().target_rmse.unwrap();
        assert_eq!(curve.points.len(), 3);
        assert!(curve.points[0].per_seed.iter().all(|&e| e == base));
        assert_eq!(curve.orders.len(), 3);
        let fixed = intervention_curve(
            &m,
            &ds,
            &split.test,
            &InterventionOrdering::Fixed(vec![1, 0]),
            &[0],
        )
        .unwrap();
        assert_eq!(fixed.orders, vec![vec![1, 0]]);
        assert!(intervention_curve(&m, &ds, &split.test, &InterventionOrdering::Fixed(vec![0]), &[0]).is_err());
    }

    #[test]
    fn oracle_warning_only_for_dependent_f() {
        assert!(oracle_mode_warning(TrainingMode::Independent).is_none());
        assert!(oracle_mode_warning(TrainingMode::Joint).is_some());
    }

    #[test]
    fn sweep_table_shape() {
        let (ds, split, _) = setup();
        let cfg = SweepConfig {
            train: TrainConfig {
                g_hidden: vec![8],
                f_hidden: vec![4],
                epochs: 2,
                batch_size: 64,
                ..TrainConfig::default()
            },
            lambda: None,
            width: SweepWidth::Scalar,
            seeds: vec![0, 1],
        };
        let t = single_concept_sweep(&ds, &split, &cfg).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.columns.len(), 3);
        assert_eq!(t.columns[2], "all");
        for row in &t.cells {
            for c in row {
                assert_eq!(c.values.len(), 2);
                assert!(!c.failed());
            }
        }
        assert_eq!(t.lambda, 1.0);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
