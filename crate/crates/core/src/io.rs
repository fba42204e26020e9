// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats: `.npy` dense matrices, delimited annotation tables, TOML schemas.
//!
//! A dataset directory written by [`save_dataset`] contains:
//!
//! - `inputs.npy`: row-major `N x d` float64 matrix; the id of row `i` is `i`.
//! - `annotations.csv`: header `id,<group>...,target`, one row per id.
//! - `schema.toml`: `encoding` plus `[[groups]]` tables of `name`/`cardinality`.
//! - `dataset.toml`: task kind and provenance.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array1, Array2};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use crate::data::{ConceptDataset, ConceptSchema, TaskKind};
use crate::error::{CbmError, Result};
use crate::scalar::Scalar;

pub const ID_COLUMN: &str = "id";
pub const TARGET_COLUMN: &str = "target";

pub fn write_matrix<T: Scalar>(path: &Path, m: &Array2<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| CbmError::io(path, e))?;
    m.mapv(|v| v.as_f64())
        .write_npy(BufWriter::new(f))
        .map_err(|e| CbmError::format(path, e))
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let f = File::open(path).map_err(|e| CbmError::io(path, e))?;
    let m = Array2::<f64>::read_npy(f).map_err(|e| CbmError::format(path, e))?;
    Ok(m.mapv(T::of))
}

pub fn write_vector<T: Scalar>(path: &Path, v: &Array1<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| CbmError::io(path, e))?;
    v.mapv(|x| x.as_f64())
        .write_npy(BufWriter::new(f))
        .map_err(|e| CbmError::format(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CbmError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CbmError::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| CbmError::io(path, e))
}

pub fn read_schema(path: &Path) -> Result<ConceptSchema> {
    ConceptSchema::from_toml_str(&read_text(path)?)
}

/// Input rows keyed by id: `.npy` files use the row index as id, `.csv` files
/// carry an explicit `id` column followed by feature columns.
fn read_inputs<T: Scalar>(path: &Path) -> Result<(Vec<String>, Array2<T>)> {
    let is_csv = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    if !is_csv {
        let m = read_matrix::<T>(path)?;
        let ids = (0..m.nrows()).map(|i| i.to_string()).collect();
        return Ok((ids, m));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CbmError::format(path, e))?;
    let headers = rdr.headers().map_err(|e| CbmError::format(path, e))?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == ID_COLUMN)
        .ok_or_else(|| CbmError::format(path, "missing 'id' column"))?;
    let d = headers.len() - 1;
    let mut ids = Vec::new();
    let mut vals = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CbmError::format(path, e))?;
        if rec.len() != headers.len() {
            return Err(CbmError::BadRow {
                row,
                message: format!("expected {} fields, got {}", headers.len(), rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            if j == id_col {
                ids.push(field.to_string());
            } else {
                vals.push(parse_real(field, row, headers.get(j).unwrap_or("?"))?);
            }
        }
    }
    let m = Array2::from_shape_vec((ids.len(), d), vals).map_err(|e| CbmError::format(path, e))?;
    Ok((ids, m.mapv(T::of)))
}

fn parse_real(field: &str, row: usize, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| CbmError::BadRow {
        row,
        message: format!("column '{column}': cannot parse '{field}' as a number"),
    })
}

/// Join an input matrix with a concept/target annotation table on the id column.
///
/// Output rows follow the input file's order, so a shuffled annotation file
/// yields the same dataset.
pub fn load_tabular_dataset<T: Scalar>(
    inputs_path: &Path,
    annotations_path: &Path,
    schema: &ConceptSchema,
    task_kind: TaskKind,
) -> Result<ConceptDataset<T>> {
    let (ids, inputs) = read_inputs::<T>(inputs_path)?;
    let mut input_row: HashMap<&str, usize> = HashMap::new();
    for (row, id) in ids.iter().enumerate() {
        if input_row.insert(id.as_str(), row).is_some() {
            return Err(CbmError::DuplicateId {
                id: id.clone(),
                row,
            });
        }
    }

    let ap = annotations_path;
    let mut rdr = csv::Reader::from_path(ap).map_err(|e| CbmError::format(ap, e))?;
    let headers = rdr.headers().map_err(|e| CbmError::format(ap, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col(ID_COLUMN).ok_or_else(|| CbmError::format(ap, "missing 'id' column"))?;
    let target_col =
        col(TARGET_COLUMN).ok_or_else(|| CbmError::format(ap, "missing 'target' column"))?;
    let group_cols = schema
        .groups()
        .iter()
        .map(|g| {
            col(&g.name).ok_or_else(|| {
                CbmError::Schema(format!(
                    "schema group '{}' has no column in {}",
                    g.name,
                    ap.display()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let expected_cols = schema.k_groups() + 2;
    if headers.len() != expected_cols {
        let extra: Vec<&str> = headers
            .iter()
            .filter(|h| *h != ID_COLUMN && *h != TARGET_COLUMN && schema.group_index(h).is_none())
            .collect();
        return Err(CbmError::Schema(format!(
            "annotation columns not in schema: {extra:?}"
        )));
    }

    let n = ids.len();
    let mut concepts = Array2::<T>::zeros((n, schema.k_groups()));
    let mut targets = Array1::<T>::zeros(n);
    let mut filled = vec![false; n];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CbmError::format(ap, e))?;
        let id = rec.get(id_col).unwrap_or("");
        let &dst = input_row
            .get(id)
            .ok_or_else(|| CbmError::UnknownId(id.to_string()))?;
        if filled[dst] {
            return Err(CbmError::DuplicateId {
                id: id.to_string(),
                row,
            });
        }
        filled[dst] = true;
        for (g, &c) in group_cols.iter().enumerate() {
            concepts[[dst, g]] = T::of(parse_real(&rec[c], row, &schema.groups()[g].name)?);
        }
        targets[dst] = T::of(parse_real(&rec[target_col], row, TARGET_COLUMN)?);
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(CbmError::MissingId(ids[missing].clone()));
    }
    ConceptDataset::new(
        inputs,
        concepts,
        targets,
        schema.clone(),
        task_kind,
        format!(
            "tabular: {} + {}",
            inputs_path.display(),
            annotations_path.display()
        ),
    )
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    task_kind: TaskKind,
    provenance: String,
}

pub fn save_dataset<T: Scalar>(dir: &Path, ds: &ConceptDataset<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CbmError::io(dir, e))?;
    write_matrix(&dir.join("inputs.npy"), &ds.inputs)?;
    let ap = dir.join("annotations.csv");
    let mut w = csv::Writer::from_path(&ap).map_err(|e| CbmError::format(&ap, e))?;
    let mut header = vec![ID_COLUMN.to_string()];
    header.extend(ds.schema.groups().iter().map(|g| g.name.clone()));
    header.push(TARGET_COLUMN.to_string());
    w.write_record(&header).map_err(|e| CbmError::format(&ap, e))?;
    for i in 0..ds.len() {
        let mut rec = vec![i.to_string()];
        rec.extend(ds.concepts_raw.row(i).iter().map(|v| format!("{}", v.as_f64())));
        rec.push(format!("{}", ds.targets[i].as_f64()));
        w.write_record(&rec).map_err(|e| CbmError::format(&ap, e))?;
    }
    w.flush().map_err(|e| CbmError::io(&ap, e))?;
    write_text(&dir.join("schema.toml"), &ds.schema.to_toml_string())?;
    let meta = DatasetMeta {
        task_kind: ds.task_kind,
        provenance: ds.provenance.clone(),
    };
    write_text(
        &dir.join("dataset.toml"),
        &toml::to_string(&meta).expect("meta serializes"),
    )
}

pub fn load_dataset_dir<T: Scalar>(dir: &Path) -> Result<ConceptDataset<T>> {
    let schema = read_schema(&dir.join("schema.toml"))?;
    let meta_path = dir.join("dataset.toml");
    let meta: DatasetMeta = toml::from_str(&read_text(&meta_path)?)
        .map_err(|e| CbmError::format(&meta_path, e))?;
    let mut ds = load_tabular_dataset(
        &dir.join("inputs.npy"),
        &dir.join("annotations.csv"),
        &schema,
        meta.task_kind,
    )?;
    ds.provenance = meta.provenance;
    Ok(ds)
}
