// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bottleneck models `f(g(x))` and their trainers.

mod predictor;
mod train;

pub use predictor::{Branch, ConceptCache, ConceptPredictor, TargetPredictor};
pub use train::{
    concept_loss, default_lambda, fit_concept_predictor, fit_target_predictor, target_loss,
    train_independent, train_independent_and_sequential, train_joint, train_sequential, ConceptLoss, JointRegularizer, RegTerm,
    TargetLoss, TrainConfig,
};
pub(crate) use train::{fit_joint, stream_rng, STREAM_G_INIT};
#[cfg(test)]
pub(crate) use train::joint_batch;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{argmax, ConceptDataset, ConceptSchema, TaskKind, UnitKind};
use crate::error::{CbmError, Result};
use crate::io::{read_text, write_text};
use crate::regularizers::ExtendedBottleneckConfig;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Independent,
    Sequential,
    Joint,
    ExtendedJoint,
}

impl TrainingMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Independent => "independent",
            TrainingMode::Sequential => "sequential",
            TrainingMode::Joint => "joint",
            TrainingMode::ExtendedJoint => "extended_joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub target_loss: Option<f64>,
    pub concept_loss: Option<f64>,
    pub reg_loss: Option<f64>,
    pub mi_estimate: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub epochs_run: usize,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<EpochRecord>,
    pub phases: Vec<PhaseSummary>,
}

impl TrainingLog {
    pub fn phase(&self, name: &str) -> impl Iterator<Item = &EpochRecord> {
        let name = name.to_string();
        self.entries.iter().filter(move |e| e.phase == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BottleneckModel<T> {
    pub g: ConceptPredictor<T>,
    pub f: TargetPredictor<T>,
    pub schema: ConceptSchema,
    pub mode: TrainingMode,
    /// Joint concept-loss weight; `None` for independent/sequential.
    pub lambda: Option<f64>,
    pub task_kind: TaskKind,
    /// Fingerprint of the dataset the model was trained on.
    pub dataset_fingerprint: String,
    pub training_log: TrainingLog,
    pub extended: Option<ExtendedBottleneckConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub name: String,
    /// For real-valued groups (and all groups under scalar encoding).
    pub rmse: Option<f64>,
    /// For categorical groups under one-hot encoding.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub target_rmse: Option<f64>,
    pub target_error_rate: Option<f64>,
    /// Over all supervised concept-layer units.
    pub concept_rmse: f64,
    pub per_group: Vec<GroupMetric>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Checkpoint<T> {
    format_version: u32,
    scalar: String,
    model: BottleneckModel<T>,
}

fn scalar_name<T: Scalar>() -> String {
    std::any::type_name::<T>().to_string()
}

/// Root-mean-square of `pred - truth` over all entries; 0 for empty input.
pub fn rmse<T: Scalar>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let ss: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum();
    (ss / n as f64).sqrt()
}

impl<T: Scalar> BottleneckModel<T> {
    pub(crate) fn assemble(
        g: ConceptPredictor<T>,
        f: TargetPredictor<T>,
        dataset: &ConceptDataset<T>,
        mode: TrainingMode,
        lambda: Option<f64>,
        training_log: TrainingLog,
    ) -> Self {
        Self {
            schema: dataset.schema.clone(),
            g,
            f,
            mode,
            lambda,
            task_kind: dataset.task_kind,
            dataset_fingerprint: dataset.fingerprint(),
            training_log,
            extended: None,
        }
    }

    /// Concept-layer values, including any unsupervised extra units.
    pub fn predict_concepts(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.g.forward(x)
    }

    /// `f` applied to supplied concept-layer values.
    pub fn predict_target_from_concepts(&self, c: ArrayView2<T>) -> Result<Array2<T>> {
        self.f.forward(c)
    }

    /// Exactly `predict_target_from_concepts(predict_concepts(x))`.
    pub fn predict_end_to_end(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let c = self.predict_concepts(x)?;
        self.predict_target_from_concepts(c.view())
    }

    /// Point predictions: the regression output, or the argmax class.
    pub fn predict_labels(&self, out: ArrayView2<T>) -> Array1<T> {
        match self.task_kind {
            TaskKind::Regression => out.column(0).to_owned(),
            TaskKind::Classification => out
                .outer_iter()
                .map(|r| T::of(argmax(r.iter().copied()) as f64))
                .collect(),
        }
    }

    /// RMSE for regression, error rate for classification.
    pub fn target_error(&self, out: ArrayView2<T>, y: ndarray::ArrayView1<T>) -> f64 {
        let labels = self.predict_labels(out);
        match self.task_kind {
            TaskKind::Regression => rmse(
                labels.view().insert_axis(ndarray::Axis(1)),
                y.insert_axis(ndarray::Axis(1)),
            ),
            TaskKind::Classification => {
                let wrong = labels.iter().zip(y.iter()).filter(|(a, b)| a != b).count();
                wrong as f64 / y.len().max(1) as f64
            }
        }
    }

    pub fn evaluate(&self, dataset: &ConceptDataset<T>, rows: &[usize]) -> Result<Metrics> {
        if rows.is_empty() {
            return Err(CbmError::Split("cannot evaluate on an empty split".into()));
        }
        let ds = dataset.select(rows);
        let c = self.predict_concepts(ds.inputs.view())?;
        let out = self.predict_target_from_concepts(c.view())?;
        let truth = ds.expanded_concepts();
        let k = self.schema.k_expanded();
        if truth.ncols() != k {
            return Err(CbmError::DimensionMismatch {
                expected: k,
                actual: truth.ncols(),
                context: "dataset concept width".into(),
            });
        }
        let sup = c.slice(ndarray::s![.., ..k]);
        let per_group = self
            .schema
            .groups()
            .iter()
            .enumerate()
            .map(|(gi, grp)| {
                let r = self.schema.slice(gi);
                let p = sup.slice(ndarray::s![.., r.clone()]);
                let t = truth.slice(ndarray::s![.., r]);
                if self.schema.unit_kind(gi) == UnitKind::Categorical {
                    let hits = p
                        .outer_iter()
                        .zip(t.outer_iter())
                        .filter(|(a, b)| argmax(a.iter().copied()) == argmax(b.iter().copied()))
                        .count();
                    GroupMetric {
                        name: grp.name.clone(),
                        rmse: None,
                        accuracy: Some(hits as f64 / p.nrows().max(1) as f64),
                    }
                } else {
                    GroupMetric {
                        name: grp.name.clone(),
                        rmse: Some(rmse(p, t)),
                        accuracy: None,
                    }
                }
            })
            .collect();
        let err = self.target_error(out.view(), ds.targets.view());
        let (target_rmse, target_error_rate) = match self.task_kind {
            TaskKind::Regression => (Some(err), None),
            TaskKind::Classification => (None, Some(err)),
        };
        Ok(Metrics {
            n: ds.len(),
            target_rmse,
            target_error_rate,
            concept_rmse: rmse(sup, truth.view()),
            per_group,
        })
    }

    pub fn to_checkpoint_json(&self) -> String {
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            scalar: scalar_name::<T>(),
            model: self.clone(),
        };
        serde_json::to_string(&ck).expect("model serializes")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let version = v.get("format_version").and_then(|x| x.as_u64());
        if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(CbmError::Invalid(format!(
                "unsupported checkpoint format version {version:?}"
            )));
        }
        let scalar = v.get("scalar").and_then(|x| x.as_str()).unwrap_or("");
        if scalar != scalar_name::<T>() {
            return Err(CbmError::Invalid(format!(
                "checkpoint scalar type {scalar} does not match {}",
                scalar_name::<T>()
            )));
        }
        let ck: Checkpoint<T> = serde_json::from_value(v)?;
        Ok(ck.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_checkpoint_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&read_text(path)?)
    }
}

#[cfg(test)]
mod tests;
