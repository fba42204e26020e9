// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept schemas, aligned `(x, c, y)` datasets, one-hot layout and splitting.
//!
//! A concept *group* is one human-specified concept. Groups of cardinality 1
//! hold a real value; groups of cardinality `K >= 2` hold a category index in
//! `[0, K)`. Under [`Encoding::OneHot`] a categorical group occupies `K`
//! contiguous bottleneck units holding an indicator vector, under
//! [`Encoding::Scalar`] every group occupies exactly one unit holding the raw
//! value (the category index itself for categorical groups).

use std::collections::HashSet;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CbmError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Scalar,
    OneHot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub name: String,
    pub cardinality: usize,
}

impl ConceptGroup {
    pub fn new(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            cardinality,
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.cardinality >= 2
    }
}

/// How the units of one group are read by losses and interventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    /// Single real-valued unit, squared-error loss.
    Real,
    /// Indicator slice, per-group softmax and cross-entropy.
    Categorical,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    encoding: Encoding,
    groups: Vec<ConceptGroup>,
}

/// Ordered concept groups plus the bottleneck layout they induce.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct ConceptSchema {
    groups: Vec<ConceptGroup>,
    encoding: Encoding,
    offsets: Vec<usize>,
}

impl TryFrom<SchemaRepr> for ConceptSchema {
    type Error = CbmError;
    fn try_from(r: SchemaRepr) -> Result<Self> {
        ConceptSchema::new(r.groups, r.encoding)
    }
}

impl From<ConceptSchema> for SchemaRepr {
    fn from(s: ConceptSchema) -> Self {
        SchemaRepr {
            encoding: s.encoding,
            groups: s.groups,
        }
    }
}

impl ConceptSchema {
    pub fn new(groups: Vec<ConceptGroup>, encoding: Encoding) -> Result<Self> {
        if groups.is_empty() {
            return Err(CbmError::Schema("at least one concept group required".into()));
        }
        let mut seen = HashSet::new();
        for g in &groups {
            if g.name.is_empty() {
                return Err(CbmError::Schema("empty group name".into()));
            }
            if !seen.insert(g.name.as_str()) {
                return Err(CbmError::Schema(format!("duplicate group name '{}'", g.name)));
            }
            if g.cardinality == 0 {
                return Err(CbmError::Schema(format!(
                    "group '{}' has cardinality 0",
                    g.name
                )));
            }
        }
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for g in &groups {
            acc += match encoding {
                Encoding::OneHot => g.cardinality,
                Encoding::Scalar => 1,
            };
            offsets.push(acc);
        }
        Ok(Self {
            groups,
            encoding,
            offsets,
        })
    }

    /// Schema of real-valued concepts, one unit each.
    pub fn scalar(names: &[&str]) -> Result<Self> {
        Self::new(
            names.iter().map(|n| ConceptGroup::new(*n, 1)).collect(),
            Encoding::Scalar,
        )
    }

    pub fn groups(&self) -> &[ConceptGroup] {
        &self.groups
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn k_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn k_expanded(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Bottleneck units owned by group `i`.
    pub fn slice(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn unit_kind(&self, i: usize) -> UnitKind {
        if self.encoding == Encoding::OneHot && self.groups[i].is_categorical() {
            UnitKind::Categorical
        } else {
            UnitKind::Real
        }
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn with_encoding(&self, encoding: Encoding) -> Self {
        Self::new(self.groups.clone(), encoding).expect("groups already validated")
    }

    /// Schema restricted to the listed groups, in the listed order.
    pub fn subset(&self, groups: &[usize]) -> Result<Self> {
        let gs = groups
            .iter()
            .map(|&i| {
                self.groups
                    .get(i)
                    .cloned()
                    .ok_or_else(|| CbmError::Invalid(format!("group index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(gs, self.encoding)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CbmError::Schema(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn check_category<T: Scalar>(&self, group: usize, row: usize, v: T) -> Result<()> {
        let g = &self.groups[group];
        let f = v.as_f64();
        if !f.is_finite() {
            return Err(CbmError::NonFinite {
                index: row,
                context: format!("concept '{}'", g.name),
            });
        }
        if g.is_categorical() && (f.fract() != 0.0 || f < 0.0 || f >= g.cardinality as f64) {
            return Err(CbmError::CategoryOutOfRange {
                group: g.name.clone(),
                row,
                value: f,
                cardinality: g.cardinality,
            });
        }
        Ok(())
    }
}

/// Expand an `N x k_groups` array of raw concept values into the one-hot bottleneck layout.
pub fn one_hot_expand<T: Scalar>(raw: ArrayView2<T>, schema: &ConceptSchema) -> Result<Array2<T>> {
    if schema.encoding() != Encoding::OneHot {
        return Err(CbmError::Schema(
            "one_hot_expand requires a one_hot schema".into(),
        ));
    }
    expand_concepts(raw, schema)
}

/// Bottleneck-layout concepts for any encoding: indicators for categorical
/// groups under one-hot, raw values otherwise.
pub fn expand_concepts<T: Scalar>(raw: ArrayView2<T>, schema: &ConceptSchema) -> Result<Array2<T>> {
    if raw.ncols() != schema.k_groups() {
        return Err(CbmError::DimensionMismatch {
            expected: schema.k_groups(),
            actual: raw.ncols(),
            context: "concept columns".into(),
        });
    }
    let mut out = Array2::zeros((raw.nrows(), schema.k_expanded()));
    for (row, (src, mut dst)) in raw.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        for g in 0..schema.k_groups() {
            let v = src[g];
            schema.check_category(g, row, v)?;
            let range = schema.slice(g);
            match schema.unit_kind(g) {
                UnitKind::Categorical => {
                    let idx = v.as_f64() as usize;
                    dst[range.start + idx] = T::one();
                }
                UnitKind::Real => dst[range.start] = v,
            }
        }
    }
    Ok(out)
}

/// Collapse bottleneck-layout values back to one value per group.
///
/// Categorical slices map to their argmax (ties go to the lowest index); real
/// units are passed through.
pub fn one_hot_collapse<T: Scalar>(
    expanded: ArrayView2<T>,
    schema: &ConceptSchema,
) -> Result<Array2<T>> {
    if expanded.ncols() != schema.k_expanded() {
        return Err(CbmError::DimensionMismatch {
            expected: schema.k_expanded(),
            actual: expanded.ncols(),
            context: "expanded concept columns".into(),
        });
    }
    let mut out = Array2::zeros((expanded.nrows(), schema.k_groups()));
    for (src, mut dst) in expanded.outer_iter().zip(out.outer_iter_mut()) {
        for g in 0..schema.k_groups() {
            let range = schema.slice(g);
            dst[g] = match schema.unit_kind(g) {
                UnitKind::Categorical => T::of(argmax(src.slice(ndarray::s![range]).iter().copied()) as f64),
                UnitKind::Real => src[range.start],
            };
        }
    }
    Ok(out)
}

/// Index of the first maximum.
pub(crate) fn argmax<T: Scalar>(xs: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, v) in xs.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Aligned inputs, concepts and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConceptDataset<T> {
    pub inputs: Array2<T>,
    pub concepts_raw: Array2<T>,
    pub targets: Array1<T>,
    pub schema: ConceptSchema,
    pub task_kind: TaskKind,
    pub provenance: String,
}

impl<T: Scalar> ConceptDataset<T> {
    pub fn new(
        inputs: Array2<T>,
        concepts_raw: Array2<T>,
        targets: Array1<T>,
        schema: ConceptSchema,
        task_kind: TaskKind,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let ds = Self {
            inputs,
            concepts_raw,
            targets,
            schema,
            task_kind,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.nrows();
        if n == 0 {
            return Err(CbmError::Dataset("dataset has no rows".into()));
        }
        if self.concepts_raw.nrows() != n || self.targets.len() != n {
            return Err(CbmError::Dataset(format!(
                "row counts differ: inputs {}, concepts {}, targets {}",
                n,
                self.concepts_raw.nrows(),
                self.targets.len()
            )));
        }
        if self.concepts_raw.ncols() != self.schema.k_groups() {
            return Err(CbmError::DimensionMismatch {
                expected: self.schema.k_groups(),
                actual: self.concepts_raw.ncols(),
                context: "concept columns vs schema groups".into(),
            });
        }
        if let Some((i, _)) = self.inputs.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CbmError::NonFinite {
                index: i / self.inputs.ncols().max(1),
                context: "inputs".into(),
            });
        }
        for (row, r) in self.concepts_raw.outer_iter().enumerate() {
            for g in 0..self.schema.k_groups() {
                self.schema.check_category(g, row, r[g])?;
            }
        }
        for (row, &y) in self.targets.iter().enumerate() {
            if !y.is_finite() {
                return Err(CbmError::NonFinite {
                    index: row,
                    context: "targets".into(),
                });
            }
            if self.task_kind == TaskKind::Classification {
                let f = y.as_f64();
                if f < 0.0 || f.fract() != 0.0 {
                    return Err(CbmError::BadRow {
                        row,
                        message: format!("class label {f} is not a nonnegative integer"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Number of classes (max label + 1) for classification, 1 for regression.
    pub fn target_dim(&self) -> usize {
        match self.task_kind {
            TaskKind::Regression => 1,
            TaskKind::Classification => {
                self.targets.iter().fold(0usize, |m, &y| m.max(y.as_f64() as usize)) + 1
            }
        }
    }

    /// Ground-truth concepts in the schema's bottleneck layout.
    pub fn expanded_concepts(&self) -> Array2<T> {
        expand_concepts(self.concepts_raw.view(), &self.schema).expect("validated dataset")
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), indices),
            concepts_raw: self.concepts_raw.select(Axis(0), indices),
            targets: self.targets.select(Axis(0), indices),
            schema: self.schema.clone(),
            task_kind: self.task_kind,
            provenance: self.provenance.clone(),
        }
    }

    /// Same rows, restricted to the listed concept groups.
    pub fn with_groups(&self, groups: &[usize]) -> Result<Self> {
        let schema = self.schema.subset(groups)?;
        Ok(Self {
            inputs: self.inputs.clone(),
            concepts_raw: self.concepts_raw.select(Axis(1), groups),
            targets: self.targets.clone(),
            schema,
            task_kind: self.task_kind,
            provenance: self.provenance.clone(),
        })
    }

    pub fn with_encoding(&self, encoding: Encoding) -> Self {
        Self {
            schema: self.schema.with_encoding(encoding),
            ..self.clone()
        }
    }

    /// Z-score real-valued concept groups using statistics of the `train` rows.
    /// Categorical groups are left untouched. Returns per-group `(mean, std)`
    /// (`(0, 1)` for untouched groups).
    pub fn normalize_concepts(
        &self,
        mode: ConceptNormalization,
        train: &[usize],
    ) -> (Self, Vec<(T, T)>) {
        let mut out = self.clone();
        let mut stats = vec![(T::zero(), T::one()); self.schema.k_groups()];
        if mode == ConceptNormalization::Identity || train.is_empty() {
            return (out, stats);
        }
        for (g, group) in self.schema.groups().iter().enumerate() {
            if group.is_categorical() {
                continue;
            }
            let vals: Vec<T> = train.iter().map(|&i| self.concepts_raw[[i, g]]).collect();
            let m = crate::scalar::mean(&vals);
            let mut s = crate::scalar::std_dev(&vals);
            if s <= T::zero() {
                s = T::one();
            }
            out.concepts_raw
                .column_mut(g)
                .mapv_inplace(|v| (v - m) / s);
            stats[g] = (m, s);
        }
        (out, stats)
    }

    /// Stable content hash of the dataset (values, schema and task kind).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |a: &mut dyn Iterator<Item = T>, shape: &[usize]| {
            for s in shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in a {
                h.update(v.as_f64().to_le_bytes());
            }
        };
        feed(&mut self.inputs.iter().copied(), self.inputs.shape());
        feed(&mut self.concepts_raw.iter().copied(), self.concepts_raw.shape());
        feed(&mut self.targets.iter().copied(), self.targets.shape());
        h.update(serde_json::to_vec(&self.schema).expect("schema serializes"));
        h.update(serde_json::to_vec(&self.task_kind).expect("task kind serializes"));
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptNormalization {
    #[default]
    Identity,
    ZScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// Disjoint train/validation/test row indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DataSplit {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(CbmError::Split(format!("index {i} out of range for N={n}")));
            }
            if !seen.insert(i) {
                return Err(CbmError::Split(format!("index {i} appears in two parts")));
            }
        }
        Ok(())
    }
}

/// Deterministic split; stratified by class label for classification tasks.
///
/// Each part receives `floor(fraction * N)` rows.
pub fn split_dataset<T: Scalar>(
    dataset: &ConceptDataset<T>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DataSplit> {
    let (ft, fv, fs) = fractions;
    for (name, f) in [("train", ft), ("val", fv), ("test", fs)] {
        if !(0.0..=1.0).contains(&f) || !f.is_finite() {
            return Err(CbmError::Split(format!("{name} fraction {f} not in [0, 1]")));
        }
    }
    if ft + fv + fs > 1.0 + 1e-9 {
        return Err(CbmError::Split(format!(
            "fractions sum to {} > 1",
            ft + fv + fs
        )));
    }
    let n = dataset.len();
    let count = |f: f64, name: &str| -> Result<usize> {
        let c = (f * n as f64 + 1e-9).floor() as usize;
        if f > 0.0 && c == 0 {
            return Err(CbmError::Split(format!(
                "{name} part would be empty (fraction {f}, N={n})"
            )));
        }
        Ok(c)
    };
    let (nt, nv, ns) = (count(ft, "train")?, count(fv, "val")?, count(fs, "test")?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = match dataset.task_kind {
        TaskKind::Regression => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        }
        TaskKind::Classification => {
            // Round-robin over shuffled per-class queues keeps every prefix
            // balanced to within one sample per class.
            let classes = dataset.target_dim();
            let mut queues: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &y) in dataset.targets.iter().enumerate() {
                queues[y.as_f64() as usize].push(i);
            }
            for q in queues.iter_mut() {
                q.shuffle(&mut rng);
            }
            let mut class_order: Vec<usize> = (0..classes).collect();
            class_order.shuffle(&mut rng);
            let mut out = Vec::with_capacity(n);
            let mut cursor = vec![0usize; classes];
            while out.len() < n {
                for &c in &class_order {
                    if cursor[c] < queues[c].len() {
                        out.push(queues[c][cursor[c]]);
                        cursor[c] += 1;
                    }
                }
            }
            out
        }
    };
    Ok(DataSplit {
        train: order[..nt].to_vec(),
        val: order[nt..nt + nv].to_vec(),
        test: order[nt + nv..nt + nv + ns].to_vec(),
        seed,
    })
}
