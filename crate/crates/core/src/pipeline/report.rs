// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::diagnostics::AlignmentReport;
use crate::error::{CbmError, Result};
use crate::models::{Metrics, PhaseSummary, TrainingMode};
use crate::probes::{mean_std, InterventionCurve, SweepTable};
use crate::regularizers::AngularStats;

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub seed: u64,
    pub mode: TrainingMode,
    pub lambda: Option<f64>,
    pub dataset_fingerprint: String,
    /// Path relative to the run directory.
    pub checkpoint: String,
    pub phases: Vec<PhaseSummary>,
    pub test: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub seed: u64,
    pub test: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    /// Seed the model was trained with.
    pub training_seed: u64,
    pub curve: InterventionCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedRecord {
    pub seed: u64,
    /// Histogram sum-MI among learned units on test rows, before and after training.
    pub mi_start: Option<f64>,
    pub mi_end: Option<f64>,
    /// Monitor value logged at the start of each epoch.
    pub mi_history: Vec<Option<f64>>,
    pub angular: AngularStats,
    pub orthogonality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub seed: u64,
    pub mode: TrainingMode,
    pub group: String,
    pub rows: Vec<usize>,
    /// Per row: fraction of aggregate L1 mass on the group's generating
    /// coordinates, when those are known.
    pub support_mass: Option<Vec<f64>>,
    /// `.npy` of shape `(rows, categories + 1, input_dim)`, aggregate last.
    pub maps_file: String,
    pub figure: String,
}

/// Single-concept cells where joint beats the oracle, and how full
/// intervention compares across modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageSummary {
    /// Per concept column: `(oracle - joint) / oracle`, from sweep means.
    pub joint_gain_over_oracle: Vec<(String, f64)>,
    /// Mean fully-intervened error per mode, averaged over training seeds.
    pub fully_intervened: Vec<(TrainingMode, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub format_version: u32,
    pub toolkit_version: String,
    pub config_hash: String,
    /// Re-running this config reproduces the report.
    pub config: ExperimentConfig,
    pub dataset_fingerprint: String,
    pub models: Vec<ModelRecord>,
    pub lambda_sweep: Vec<LambdaPoint>,
    pub sweep: Option<SweepTable>,
    pub curves: Vec<CurveRecord>,
    pub alignment: Option<AlignmentReport>,
    pub extended: Vec<ExtendedRecord>,
    pub saliency: Vec<SaliencyRecord>,
    pub leakage: Option<LeakageSummary>,
    pub warnings: Vec<String>,
}

/// Components gathered by a run.
#[derive(Clone, Debug, Default)]
pub struct ReportParts {
    pub models: Vec<ModelRecord>,
    pub lambda_sweep: Vec<LambdaPoint>,
    pub sweep: Option<SweepTable>,
    pub curves: Vec<CurveRecord>,
    pub alignment: Option<AlignmentReport>,
    pub extended: Vec<ExtendedRecord>,
    pub saliency: Vec<SaliencyRecord>,
    pub warnings: Vec<String>,
}

fn leakage(sweep: Option<&SweepTable>, curves: &[CurveRecord]) -> Option<LeakageSummary> {
    let mut gains = Vec::new();
    if let Some(t) = sweep {
        for (c, name) in t.columns.iter().enumerate().take(t.all_column()) {
            let (j, o) = (t.cell("joint", name)?, t.cell("oracle", name)?);
            if let (Some(j), Some(o)) = (j.mean, o.mean) {
                if o > 0.0 {
                    gains.push((t.columns[c].clone(), (o - j) / o));
                }
            }
        }
    }
    let mut full = Vec::new();
    for mode in [TrainingMode::Independent, TrainingMode::Sequential, TrainingMode::Joint] {
        let v: Vec<f64> = curves
            .iter()
            .filter(|c| c.curve.mode == mode)
            .filter_map(|c| c.curve.points.last().map(|p| p.mean_error))
            .collect();
        if !v.is_empty() {
            full.push((mode, mean_std(&v).0));
        }
    }
    (!gains.is_empty() || !full.is_empty()).then_some(LeakageSummary {
        joint_gain_over_oracle: gains,
        fully_intervened: full,
    })
}

/// Bundle run components into a report after checking that every model
/// descends from `dataset_fingerprint` and that the report survives a JSON
/// round trip unchanged.
pub fn assemble_report(
    config: &ExperimentConfig,
    dataset_fingerprint: &str,
    parts: ReportParts,
) -> Result<DiagnosticsReport> {
    if let Some(m) = parts.models.iter().find(|m| m.dataset_fingerprint != dataset_fingerprint) {
        return Err(CbmError::Lineage(format!(
            "{} model (seed {}) was trained on {}, report dataset is {dataset_fingerprint}",
            m.mode.name(),
            m.seed,
            m.dataset_fingerprint
        )));
    }
    let leakage = leakage(parts.sweep.as_ref(), &parts.curves);
    let report = DiagnosticsReport {
        format_version: REPORT_FORMAT_VERSION,
        toolkit_version: TOOLKIT_VERSION.to_string(),
        config_hash: config.hash(),
        config: config.clone(),
        dataset_fingerprint: dataset_fingerprint.to_string(),
        models: parts.models,
        lambda_sweep: parts.lambda_sweep,
        sweep: parts.sweep,
        curves: parts.curves,
        alignment: parts.alignment,
        extended: parts.extended,
        saliency: parts.saliency,
        leakage,
        warnings: parts.warnings,
    };
    let back = DiagnosticsReport::from_json(&report.to_json())
        .map_err(|e| CbmError::Invalid(format!("report does not round-trip: {e}")))?;
    if back != report {
        return Err(CbmError::Invalid("report does not round-trip losslessly".into()));
    }
    Ok(report)
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_markdown(&self) -> String {
        render_markdown(self)
    }
}

fn pm(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        (Some(m), None) => format!("{m:.4}"),
        _ => "failed".into(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Human-readable summary of a report.
pub fn render_markdown(r: &DiagnosticsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run `{}`\n", r.config.name);
    let _ = writeln!(s, "- toolkit version: {}", r.toolkit_version);
    let _ = writeln!(s, "- config hash: `{}`", r.config_hash);
    let _ = writeln!(s, "- dataset fingerprint: `{}`", r.dataset_fingerprint);
    let _ = writeln!(s, "- seeds: {:?}\n", r.config.seeds);

    if !r.models.is_empty() {
        let _ = writeln!(s, "## Models (test split)\n");
        let _ = writeln!(s, "| seed | mode | λ | target error | concept RMSE |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for m in &r.models {
            let err = m.test.target_rmse.or(m.test.target_error_rate);
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.4} |",
                m.seed,
                m.mode.name(),
                opt(m.lambda),
                opt(err),
                m.test.concept_rmse
            );
        }
        s.push('\n');
    }

    if let Some(t) = &r.sweep {
        let _ = writeln!(s, "## Leakage table\n");
        let _ = writeln!(
            s,
            "Test target error of bottlenecks given one concept (or all), mean ± std over {} seeds; \
             λ = {}, width = {:?}.\n",
            t.seeds.len(),
            t.lambda,
            t.width
        );
        let _ = writeln!(s, "| model | {} |", t.columns.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(t.columns.len()));
        for (row, cells) in t.rows.iter().zip(&t.cells) {
            let c: Vec<String> = cells.iter().map(|c| pm(c.mean, c.std)).collect();
            let _ = writeln!(s, "| {row} | {} |", c.join(" | "));
        }
        s.push('\n');
    }

    if let Some(l) = &r.leakage {
        if !l.joint_gain_over_oracle.is_empty() {
            let _ = writeln!(s, "Relative gain of joint over oracle per concept (positive means leakage):\n");
            for (name, g) in &l.joint_gain_over_oracle {
                let _ = writeln!(s, "- {name}: {:.1}%", 100.0 * g);
            }
            s.push('\n');
        }
        if !l.fully_intervened.is_empty() {
            let _ = writeln!(s, "Error with every concept group intervened:\n");
            for (m, e) in &l.fully_intervened {
                let _ = writeln!(s, "- {}: {e:.4}", m.name());
            }
            s.push('\n');
        }
    }

    if !r.curves.is_empty() {
        let _ = writeln!(s, "## Intervention curves\n");
        let _ = writeln!(s, "Error after intervening on m groups, mean ± std over ordering seeds.\n");
        let k = r.curves[0].curve.points.len();
        let header: Vec<String> = (0..k).map(|m| format!("m={m}")).collect();
        let _ = writeln!(s, "| mode | seed | {} |", header.join(" | "));
        let _ = writeln!(s, "|---|---|{}", "---|".repeat(k));
        for c in &r.curves {
            let p: Vec<String> = c
                .curve
                .points
                .iter()
                .map(|p| pm(Some(p.mean_error), Some(p.std_error)))
                .collect();
            let _ = writeln!(s, "| {} | {} | {} |", c.curve.mode.name(), c.training_seed, p.join(" | "));
        }
        s.push('\n');
    }

    if let Some(a) = &r.alignment {
        let _ = writeln!(s, "## Saliency alignment\n");
        let _ = writeln!(
            s,
            "R² of concept-space saliency ({:?}, {} test rows); the first model of each pair is the reference. \
             Spearman ρ is an additional rank-agreement column.\n",
            a.params.method, a.n_rows
        );
        let _ = writeln!(s, "| reference | other | mean R² | std across samples | std across seeds | skipped | Spearman ρ |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for p in &a.summary {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} |",
                p.reference,
                p.other,
                p.mean_r2,
                p.mean_std_across_samples,
                p.std_across_seeds,
                p.n_skipped,
                opt(p.mean_spearman)
            );
        }
        s.push('\n');
    }

    if !r.lambda_sweep.is_empty() {
        let _ = writeln!(s, "## λ sweep (joint)\n");
        let _ = writeln!(s, "| λ | seed | target error | concept RMSE |");
        let _ = writeln!(s, "|---|---|---|---|");
        for p in &r.lambda_sweep {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} |",
                p.lambda,
                p.seed,
                opt(p.test.target_rmse.or(p.test.target_error_rate)),
                p.test.concept_rmse
            );
        }
        s.push('\n');
    }

    if !r.extended.is_empty() {
        let _ = writeln!(s, "## Extended bottleneck\n");
        let _ = writeln!(s, "| seed | MI start | MI end | mean angle | angle variance | orthogonality |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for e in &r.extended {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                e.seed,
                opt(e.mi_start),
                opt(e.mi_end),
                e.angular.mean_angle,
                e.angular.angle_variance,
                e.orthogonality
            );
        }
        s.push('\n');
    }

    if !r.saliency.is_empty() {
        let _ = writeln!(s, "## Input saliency\n");
        for sr in &r.saliency {
            let mass = sr.support_mass.as_ref().map(|v| {
                let (m, _) = mean_std(v);
                format!(", mean support mass {m:.3}")
            });
            let _ = writeln!(
                s,
                "- {} (seed {}, {}): ![]({}) maps in `{}`{}",
                sr.group,
                sr.seed,
                sr.mode.name(),
                sr.figure,
                sr.maps_file,
                mass.unwrap_or_default()
            );
        }
        s.push('\n');
    }

    if !r.warnings.is_empty() {
        let _ = writeln!(s, "## Warnings\n");
        for w in &r.warnings {
            let _ = writeln!(s, "- {w}");
        }
    }
    s
}
