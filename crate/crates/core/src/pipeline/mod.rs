// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end experiment runs: data, training, probes, attribution and the
//! report, written to one content-addressed directory per configuration.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml        resolved configuration; rerunning it reproduces report.json
//! manifest.json      status, timestamps, artifacts, error on failure
//! dataset/           the exact data used
//! models/seed-S/     checkpoints per training mode
//! maps/              raw saliency arrays (.npy)
//! figures/           PNG figures
//! report.json        machine-readable report
//! report.md          human-readable summary
//! ```

mod config;
mod report;

pub use config::{
    AlignmentSection, DataSource, ExperimentConfig, InterventionSection, SaliencySection,
    SplitConfig, SweepSection, DEFAULT_OUTPUT_ROOT, OUTPUT_ROOT_ENV,
};
pub use report::{
    assemble_report, render_markdown, CurveRecord, DiagnosticsReport, ExtendedRecord, LambdaPoint,
    LeakageSummary, ModelRecord, ReportParts, SaliencyRecord, REPORT_FORMAT_VERSION,
    TOOLKIT_VERSION,
};

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::attribution::{aggregate_group_saliency, concept_to_input_saliency, Attributor};
use crate::data::{split_dataset, ConceptDataset, DataSplit, UnitKind};
use crate::diagnostics::{oracle_alignment_report, SeedModels};
use crate::error::{CbmError, Result};
use crate::io::{load_dataset_dir, load_tabular_dataset, read_schema, save_dataset, write_text};
use crate::models::{
    default_lambda, train_independent, train_independent_and_sequential, train_joint,
    train_sequential, BottleneckModel, TrainingMode,
};
use crate::probes::{intervention_curve, single_concept_sweep, SweepConfig};
use crate::regularizers::{
    angular_diversification, build_extended_predictor, extract_vector_representation,
    new_unit_mi, orthogonality_penalty, train_extended_joint,
};
use crate::render::{render_intervention_curves, render_saliency_grid, save_png, CurveSeries, SaliencyGridRow};
use crate::synth::generate_task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Run bookkeeping; the only artifact that carries wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    pub toolkit_version: String,
    pub config_hash: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub duration_secs: Option<f64>,
    /// Paths relative to the run directory, in write order.
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: DiagnosticsReport,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Sole writer of files in the run directory; records each artifact.
struct RunWriter {
    dir: PathBuf,
    manifest: Manifest,
    clock: Instant,
}

impl RunWriter {
    fn new(dir: PathBuf, config_hash: String) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| CbmError::io(&dir, e))?;
        let w = Self {
            dir,
            manifest: Manifest {
                status: RunStatus::Running,
                toolkit_version: TOOLKIT_VERSION.to_string(),
                config_hash,
                started_unix: now_unix(),
                finished_unix: None,
                duration_secs: None,
                artifacts: Vec::new(),
                error: None,
            },
            clock: Instant::now(),
        };
        w.flush_manifest()?;
        Ok(w)
    }

    fn path(&mut self, rel: &str) -> PathBuf {
        self.manifest.artifacts.push(rel.to_string());
        self.dir.join(rel)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        write_text(&p, text)
    }

    fn flush_manifest(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_text(&self.dir.join("manifest.json"), &json)
    }

    fn finish(&mut self, status: RunStatus, error: Option<String>) -> Result<()> {
        self.manifest.status = status;
        self.manifest.error = error;
        self.manifest.finished_unix = Some(now_unix());
        self.manifest.duration_secs = Some(self.clock.elapsed().as_secs_f64());
        self.flush_manifest()
    }
}

/// Load or generate the configured dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<ConceptDataset<f64>> {
    if let Some(spec) = cfg.data.synthetic_spec() {
        return Ok(generate_task::<f64>(&spec, spec.seed)?.dataset);
    }
    match &cfg.data {
        DataSource::Tabular { inputs, annotations, schema, task } => {
            load_tabular_dataset(inputs, annotations, &read_schema(schema)?, *task)
        }
        DataSource::Directory { path } => load_dataset_dir(path),
        _ => unreachable!("synthetic sources handled above"),
    }
}

/// Run `cfg` under `root`, returning the run directory and report. On
/// failure the artifacts written so far are kept and the manifest records
/// the error.
pub fn run_pipeline(cfg: &ExperimentConfig, root: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir(root);
    let mut w = RunWriter::new(dir.clone(), cfg.hash())?;
    match run_stages(cfg, &mut w) {
        Ok(report) => {
            w.finish(RunStatus::Completed, None)?;
            Ok(RunOutcome { run_dir: dir, report })
        }
        Err(e) => {
            // The original error matters more than a manifest write failure.
            let _ = w.finish(RunStatus::Failed, Some(e.to_string()));
            Err(e)
        }
    }
}

struct SeedRun {
    seed: u64,
    models: Vec<BottleneckModel<f64>>,
}

impl SeedRun {
    fn get(&self, mode: TrainingMode) -> Option<&BottleneckModel<f64>> {
        self.models.iter().find(|m| m.mode == mode)
    }
}

fn train_seed(
    cfg: &ExperimentConfig,
    ds: &ConceptDataset<f64>,
    split: &DataSplit,
    seed: u64,
    lambda: f64,
) -> Result<Vec<BottleneckModel<f64>>> {
    let tc = cfg.train.clone().with_seed(seed);
    let has = |m| cfg.modes.contains(&m);
    let mut out = Vec::new();
    match (has(TrainingMode::Independent), has(TrainingMode::Sequential)) {
        (true, true) => {
            let (i, s) = train_independent_and_sequential(ds, split, &tc)?;
            out.push(i);
            out.push(s);
        }
        (true, false) => out.push(train_independent(ds, split, &tc)?),
        (false, true) => out.push(train_sequential(ds, split, &tc)?),
        (false, false) => {}
    }
    if has(TrainingMode::Joint) {
        out.push(train_joint(ds, split, lambda, &tc)?);
    }
    if has(TrainingMode::ExtendedJoint) {
        let ext = cfg.extended.as_ref().expect("validated");
        out.push(train_extended_joint(ds, split, ext, lambda, &tc)?);
    }
    Ok(out)
}

fn run_stages(cfg: &ExperimentConfig, w: &mut RunWriter) -> Result<DiagnosticsReport> {
    w.text("config.toml", &cfg.to_toml_string())?;
    let ds = load_data(cfg)?;
    cfg.validate_against(&ds.schema, ds.input_dim())?;
    let split = split_dataset(&ds, cfg.split.fractions, cfg.split.seed)?;
    let dataset_dir = w.path("dataset");
    save_dataset(&dataset_dir, &ds)?;
    let fp = ds.fingerprint();
    let lambda = cfg.lambda.unwrap_or_else(|| default_lambda(&ds.schema, ds.task_kind));
    let mut parts = ReportParts::default();

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let models = train_seed(cfg, &ds, &split, seed, lambda)?;
        for m in &models {
            let rel = format!("models/seed-{seed}/{}.json", m.mode.name());
            let p = w.path(&rel);
            m.save(&p)?;
            parts.models.push(ModelRecord {
                seed,
                mode: m.mode,
                lambda: m.lambda,
                dataset_fingerprint: m.dataset_fingerprint.clone(),
                checkpoint: rel,
                phases: m.training_log.phases.clone(),
                test: m.evaluate(&ds, &split.test)?,
            });
        }
        runs.push(SeedRun { seed, models });
    }

    for &l in &cfg.lambda_grid {
        for &seed in &cfg.seeds {
            let m = train_joint(&ds, &split, l, &cfg.train.clone().with_seed(seed))?;
            parts.lambda_sweep.push(LambdaPoint {
                lambda: l,
                seed,
                test: m.evaluate(&ds, &split.test)?,
            });
        }
    }

    if let Some(sw) = &cfg.sweep {
        let sc = SweepConfig {
            train: cfg.train.clone(),
            lambda: cfg.lambda,
            width: sw.width,
            seeds: cfg.seeds.clone(),
        };
        let table = single_concept_sweep(&ds, &split, &sc)?;
        for (r, row) in table.rows.iter().zip(&table.cells) {
            for (c, cell) in table.columns.iter().zip(row) {
                for (seed, msg) in &cell.failures {
                    parts.warnings.push(format!("sweep {r}/{c} seed {seed} failed: {msg}"));
                }
            }
        }
        parts.sweep = Some(table);
    }

    if let Some(iv) = &cfg.interventions {
        for run in &runs {
            for mode in [TrainingMode::Independent, TrainingMode::Sequential, TrainingMode::Joint] {
                if let Some(m) = run.get(mode) {
                    let curve = intervention_curve(m, &ds, &split.test, &iv.ordering, &iv.seeds)?;
                    parts.curves.push(CurveRecord { training_seed: run.seed, curve });
                }
            }
        }
        let first = cfg.seeds[0];
        let series: Vec<CurveSeries> = parts
            .curves
            .iter()
            .filter(|c| c.training_seed == first)
            .map(|c| CurveSeries {
                label: c.curve.mode.name().to_string(),
                points: c.curve.points.iter().map(|p| (p.m as f64, p.mean_error)).collect(),
            })
            .collect();
        if !series.is_empty() {
            let img = render_intervention_curves(&series, 480, 320)?;
            let p = w.path("figures/interventions.png");
            save_png(&img, &p)?;
        }
    }

    if let Some(al) = &cfg.alignment {
        let rows = leading(&split.test, al.max_rows);
        let seed_models: Vec<SeedModels<'_, f64>> = runs
            .iter()
            .map(|r| SeedModels {
                seed: r.seed,
                independent: r.get(TrainingMode::Independent).expect("validated"),
                sequential: r.get(TrainingMode::Sequential).expect("validated"),
                joint: r.get(TrainingMode::Joint).expect("validated"),
            })
            .collect();
        let rep = oracle_alignment_report(&seed_models, &ds, rows, &al.attribution)?;
        parts.warnings.extend(rep.warnings.iter().cloned());
        parts.alignment = Some(rep);
    }

    if let Some(ext) = &cfg.extended {
        let test_x = ds.select(&split.test).inputs;
        for run in &runs {
            let Some(m) = run.get(TrainingMode::ExtendedJoint) else { continue };
            let g0 = build_extended_predictor::<f64>(
                ds.input_dim(),
                &ds.schema,
                ext,
                &cfg.train.clone().with_seed(run.seed),
            )?;
            let z0 = g0.forward(test_x.view())?;
            let z1 = m.g.forward(test_x.view())?;
            let vecs = extract_vector_representation(&m.g, ext.vector_representation, Some(test_x.view()))?;
            let (angular, _) = angular_diversification(vecs.vectors.view(), ext.alpha, ext.abs_cos)?;
            let (orthogonality, _) = orthogonality_penalty(vecs.vectors.view())?;
            parts.extended.push(ExtendedRecord {
                seed: run.seed,
                mi_start: new_unit_mi(z0.view(), ext.k, ext.mi_bins),
                mi_end: new_unit_mi(z1.view(), ext.k, ext.mi_bins),
                mi_history: m.training_log.phase("extended").map(|e| e.mi_estimate).collect(),
                angular,
                orthogonality,
            });
        }
    }

    if let Some(sal) = &cfg.saliency {
        let run = &runs[0];
        let model = run.get(sal.mode).expect("validated");
        let rows = leading(&split.test, sal.rows).to_vec();
        let x = ds.select(&rows).inputs;
        let att = Attributor::new(&sal.attribution, ds.input_dim(), Some(ds.inputs.view()))?;
        let groups: Vec<usize> = if sal.groups.is_empty() {
            (0..ds.schema.k_groups()).collect()
        } else {
            sal.groups.clone()
        };
        let spec = cfg.data.synthetic_spec();
        for g in groups {
            let name = ds.schema.groups()[g].name.clone();
            let cats = ds.schema.slice(g).len();
            let mut arr = Array3::<f64>::zeros((rows.len(), cats + 1, ds.input_dim()));
            let mut grid = Vec::with_capacity(rows.len());
            let mut mass = Vec::with_capacity(rows.len());
            for (i, xi) in x.outer_iter().enumerate() {
                let maps = concept_to_input_saliency(model, xi, g, &att)?;
                let logits = (ds.schema.unit_kind(g) == UnitKind::Categorical).then(|| {
                    let raw = model.g.forward_raw(xi.insert_axis(ndarray::Axis(0))).expect("width checked");
                    raw.slice(s![0, ds.schema.slice(g)]).to_vec()
                });
                let agg = aggregate_group_saliency(&maps, logits.as_deref(), sal.aggregation)?;
                for (c, m) in maps.iter().enumerate() {
                    arr.slice_mut(s![i, c, ..]).assign(&m.values);
                }
                arr.slice_mut(s![i, cats, ..]).assign(&agg.values);
                if let Some(sp) = &spec {
                    mass.push(agg.mass_fraction(sp.concept_coordinates(g)));
                }
                grid.push(SaliencyGridRow {
                    input: xi.to_owned(),
                    maps: maps.into_iter().map(|m| m.values).collect(),
                    aggregate: agg.values,
                });
            }
            let maps_file = format!("maps/saliency-seed{}-{name}.npy", run.seed);
            let p = w.path(&maps_file);
            write_array3(&p, &arr)?;
            let figure = format!("figures/saliency-seed{}-{name}.png", run.seed);
            let img = render_saliency_grid(&grid, &sal.layout)?;
            let p = w.path(&figure);
            save_png(&img, &p)?;
            parts.saliency.push(SaliencyRecord {
                seed: run.seed,
                mode: sal.mode,
                group: name,
                rows: rows.clone(),
                support_mass: spec.as_ref().map(|_| mass),
                maps_file,
                figure,
            });
        }
    }

    let report = assemble_report(cfg, &fp, parts)?;
    w.text("report.json", &report.to_json())?;
    w.text("report.md", &report.to_markdown())?;
    Ok(report)
}

fn leading(rows: &[usize], max: usize) -> &[usize] {
    if max == 0 {
        rows
    } else {
        &rows[..max.min(rows.len())]
    }
}

fn write_array3(path: &Path, a: &Array3<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CbmError::io(dir, e))?;
    }
    ndarray_npy::write_npy(path, a).map_err(|e| CbmError::format(path, e))
}
