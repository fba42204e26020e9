// SPDX-License-Identifier: MIT OR Apache-2.0

use cbm_core::error::CbmError;
use cbm_core::models::TrainingMode;
use cbm_core::pipeline::{
    run_pipeline, AlignmentSection, DataSource, DiagnosticsReport, ExperimentConfig,
    InterventionSection, Manifest, RunStatus, SaliencySection, SweepSection,
};
use cbm_core::regularizers::{ExtendedBottleneckConfig, RegularizerKind};

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::new(
        "small",
        DataSource::Leaky { d: 12, k: 2, n: 400, leak_strength: 0.5, seed: 1 },
    );
    c.seeds = vec![0, 1];
    c.modes.push(TrainingMode::ExtendedJoint);
    c.train.g_hidden = vec![8];
    c.train.f_hidden = vec![4];
    c.train.epochs = 3;
    c.lambda_grid = vec![0.0, 1.0];
    c.sweep = Some(SweepSection::default());
    c.interventions = Some(InterventionSection { seeds: vec![0, 1], ..Default::default() });
    c.alignment = Some(AlignmentSection { max_rows: 20, ..Default::default() });
    c.saliency = Some(SaliencySection { rows: 3, ..Default::default() });
    c.extended = Some(ExtendedBottleneckConfig::new(2, 4, RegularizerKind::Orthogonality));
    c
}

fn read(p: &std::path::Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn full_run_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let out = run_pipeline(&cfg, root.path()).unwrap();
    let dir = &out.run_dir;
    assert!(dir.starts_with(root.path()));
    for f in [
        "config.toml",
        "manifest.json",
        "report.json",
        "report.md",
        "dataset/inputs.npy",
        "dataset/annotations.csv",
        "models/seed-0/independent.json",
        "models/seed-1/extended_joint.json",
        "figures/interventions.png",
        "figures/saliency-seed0-c0.png",
        "maps/saliency-seed0-c1.npy",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let manifest: Manifest = serde_json::from_str(&read(&dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest.status, RunStatus::Completed);
    assert!(manifest.artifacts.iter().any(|a| a == "report.json"));

    let r = &out.report;
    assert_eq!(r.models.len(), 2 * 4);
    assert_eq!(r.lambda_sweep.len(), 2 * 2);
    assert!(r.sweep.is_some() && r.alignment.is_some() && r.leakage.is_some());
    assert_eq!(r.curves.len(), 2 * 3);
    assert_eq!(r.extended.len(), 2);
    assert_eq!(r.saliency.len(), 2);
    assert_eq!(r.saliency[0].support_mass.as_ref().unwrap().len(), 3);
    let maps: ndarray::Array3<f64> = ndarray_npy::read_npy(dir.join("maps/saliency-seed0-c0.npy")).unwrap();
    assert_eq!(maps.shape(), &[3, 2, 12]);

    let back = DiagnosticsReport::from_json(&read(&dir.join("report.json"))).unwrap();
    assert_eq!(&back, r);
    let md = read(&dir.join("report.md"));
    for heading in ["## Leakage table", "## Intervention curves", "## Saliency alignment", "## Extended bottleneck"] {
        assert!(md.contains(heading), "markdown lacks {heading}");
    }
}

#[test]
fn rerun_from_snapshot_is_bit_identical() {
    let mut cfg = small_config();
    cfg.modes = vec![TrainingMode::Independent, TrainingMode::Sequential, TrainingMode::Joint];
    cfg.extended = None;
    cfg.lambda_grid.clear();
    let a = tempfile::tempdir().unwrap();
    let first = run_pipeline(&cfg, a.path()).unwrap();
    let snapshot = ExperimentConfig::load(&first.run_dir.join("config.toml")).unwrap();
    assert_eq!(snapshot, cfg);
    let b = tempfile::tempdir().unwrap();
    let second = run_pipeline(&snapshot, b.path()).unwrap();
    assert_eq!(
        read(&first.run_dir.join("report.json")),
        read(&second.run_dir.join("report.json"))
    );
    assert_eq!(
        std::fs::read(first.run_dir.join("figures/saliency-seed0-c0.png")).unwrap(),
        std::fs::read(second.run_dir.join("figures/saliency-seed0-c0.png")).unwrap()
    );
    assert_eq!(first.run_dir.file_name(), second.run_dir.file_name());
}

#[test]
fn invalid_config_rejected_before_training() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.extended.as_mut().unwrap().h = 2;
    let err = run_pipeline(&cfg, root.path()).err().unwrap();
    assert!(matches!(err, CbmError::Config { ref field, .. } if field == "extended.h"), "{err}");
    assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
}

#[test]
fn failure_keeps_artifacts_and_writes_manifest() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.sweep = None;
    cfg.alignment = None;
    cfg.saliency = None;
    cfg.interventions = None;
    cfg.lambda_grid.clear();
    cfg.train.learning_rate = 1e200;
    let err = run_pipeline(&cfg, root.path()).err().unwrap();
    assert!(matches!(err, CbmError::Divergence { .. }), "{err}");
    let dir = cfg.run_dir(root.path());
    let manifest: Manifest = serde_json::from_str(&read(&dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest.status, RunStatus::Failed);
    assert!(manifest.error.is_some());
    assert!(dir.join("config.toml").exists());
    assert!(dir.join("dataset/inputs.npy").exists());
    assert!(!dir.join("report.json").exists());
}

#[test]
fn directory_source_reproduces_synthetic_run() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.modes = vec![TrainingMode::Independent];
    cfg.extended = None;
    cfg.sweep = None;
    cfg.alignment = None;
    cfg.saliency = None;
    cfg.lambda_grid.clear();
    let first = run_pipeline(&cfg, root.path()).unwrap();
    let mut again = cfg.clone();
    again.data = DataSource::Directory { path: first.run_dir.join("dataset") };
    let second = run_pipeline(&again, root.path()).unwrap();
    assert_eq!(first.report.dataset_fingerprint, second.report.dataset_fingerprint);
    assert_eq!(first.report.models, second.report.models);
}

#[test]
fn shipped_demo_config_is_valid() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/leaky-demo.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.seeds.len(), 5);
    assert_eq!(ExperimentConfig::from_toml_str(&&cfg.to_toml_string()).unwrap(), cfg);
}
