use ndarray::{array, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::joint_batch;
use super::*;
use crate::data::{split_dataset, ConceptGroup, ConceptSchema, DataSplit, Encoding};
use crate::synth::{generate_task, SyntheticSpec};

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        g_hidden: vec![16],
        f_hidden: vec![8],
        epochs: 4,
        batch_size: 32,
        seed,
        ..Default::default()
    }
}

fn small_task(seed: u64) -> (ConceptDataset<f64>, DataSplit) {
    let spec = SyntheticSpec::leaky(12, 2, 300, 0.5, seed);
    let ds = generate_task::<f64>(&spec, seed).unwrap().dataset;
    let split = split_dataset(&ds, (0.8, 0.1, 0.1), seed).unwrap();
    (ds, split)
}

fn onehot_fixture(task: TaskKind) -> (ConceptPredictor<f64>, TargetPredictor<f64>, Array2<f64>, Array2<f64>, Array1<f64>) {
    let schema = ConceptSchema::new(
        vec![ConceptGroup::new("shape", 3), ConceptGroup::new("size", 1)],
        Encoding::OneHot,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = ConceptPredictor::new(4, &[5], crate::nn::Activation::Tanh, &schema, 0, &mut rng).unwrap();
    let outputs = if task == TaskKind::Classification { 3 } else { 1 };
    let f = TargetPredictor::new(4, &[4], crate::nn::Activation::Tanh, task, outputs, &mut rng).unwrap();
    let x = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
    let raw = Array2::from_shape_fn((6, 2), |(i, j)| if j == 0 { (i % 3) as f64 } else { 0.3 * i as f64 - 0.7 });
    let truth = crate::data::expand_concepts(raw.view(), &schema).unwrap();
    let y = Array1::from_shape_fn(6, |i| if task == TaskKind::Classification { (i % 3) as f64 } else { 0.5 - 0.2 * i as f64 });
    (g, f, x, truth, y)
}

fn total_loss(
    g: &ConceptPredictor<f64>,
    f: &TargetPredictor<f64>,
    x: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    y: &Array1<f64>,
    lambda: f64,
    ck: ConceptLoss,
    tk: TargetLoss,
) -> f64 {
    let (bl, _) = joint_batch(g, f, x, truth, y.view(), lambda, ck, tk, None).unwrap();
    bl.target.unwrap() + lambda * bl.concept.unwrap()
}

#[test]
fn joint_gradients_match_finite_differences() {
    for (task, tk) in [(TaskKind::Classification, TargetLoss::CrossEntropy), (TaskKind::Regression, TargetLoss::Mse)] {
        for ck in [ConceptLoss::PerGroupCrossEntropy, ConceptLoss::Mse] {
            let (mut g, mut f, x, truth, y) = onehot_fixture(task);
            let lambda = 0.7;
            let (_, grads) = joint_batch(&g, &f, x.view(), truth.view(), y.view(), lambda, ck, tk, None).unwrap();
            let h = 1e-6;
            let n_g = g.params_mut().len();
            for (si, gs) in grads.iter().enumerate() {
                for (pi, &analytic) in gs.iter().enumerate() {
                    let bump = |g: &mut ConceptPredictor<f64>, f: &mut TargetPredictor<f64>, d: f64| {
                        if si < n_g {
                            g.params_mut()[si][pi] += d;
                        } else {
                            f.net.params_mut()[si - n_g][pi] += d;
                        }
                    };
                    bump(&mut g, &mut f, h);
                    let lp = total_loss(&g, &f, x.view(), truth.view(), &y, lambda, ck, tk);
                    bump(&mut g, &mut f, -2.0 * h);
                    let lm = total_loss(&g, &f, x.view(), truth.view(), &y, lambda, ck, tk);
                    bump(&mut g, &mut f, h);
                    let fd = (lp - lm) / (2.0 * h);
                    let err = (fd - analytic).abs() / fd.abs().max(1e-3);
                    assert!(err < 1e-4, "{task:?} {ck:?} slice {si} param {pi}: fd {fd} analytic {analytic}");
                }
            }
        }
    }
}

#[test]
fn lambda_zero_ignores_concept_labels() {
    let (g, f, x, truth, y) = onehot_fixture(TaskKind::Regression);
    let other = truth.mapv(|v| 1.0 - v);
    let ck = ConceptLoss::PerGroupCrossEntropy;
    let a = joint_batch(&g, &f, x.view(), truth.view(), y.view(), 0.0, ck, TargetLoss::Mse, None).unwrap().1;
    let b = joint_batch(&g, &f, x.view(), other.view(), y.view(), 0.0, ck, TargetLoss::Mse, None).unwrap().1;
    assert_eq!(a, b);
}

#[test]
fn sequential_g_equals_independent_g() {
    let (ds, split) = small_task(1);
    let cfg = small_config(7);
    let ind = train_independent(&ds, &split, &cfg).unwrap();
    let seq = train_sequential(&ds, &split, &cfg).unwrap();
    assert_eq!(ind.g, seq.g);
    assert_ne!(ind.f, seq.f);
}

#[test]
fn trainers_are_deterministic() {
    let (ds, split) = small_task(2);
    let cfg = small_config(11);
    assert_eq!(train_independent(&ds, &split, &cfg).unwrap(), train_independent(&ds, &split, &cfg).unwrap());
    assert_eq!(train_sequential(&ds, &split, &cfg).unwrap(), train_sequential(&ds, &split, &cfg).unwrap());
    let a = train_joint(&ds, &split, 1.0, &cfg).unwrap();
    assert_eq!(a, train_joint(&ds, &split, 1.0, &cfg).unwrap());
    assert_eq!(a.lambda, Some(1.0));
    assert_ne!(a, train_joint(&ds, &split, 1.0, &small_config(12)).unwrap());
}

#[test]
fn joint_log_records_both_terms() {
    let (ds, split) = small_task(3);
    let m = train_joint(&ds, &split, 0.5, &small_config(1)).unwrap();
    let entries: Vec<_> = m.training_log.phase("joint").collect();
    assert!(!entries.is_empty());
    assert!(entries.iter().all(|e| e.target_loss.is_some() && e.concept_loss.is_some() && e.val_loss.is_some()));
}

#[test]
fn composition_identity_and_edge_cases() {
    let (ds, split) = small_task(4);
    let m = train_joint(&ds, &split, 1.0, &small_config(2)).unwrap();
    let x = ds.inputs.slice(ndarray::s![..20, ..]);
    let c = m.predict_concepts(x).unwrap();
    assert_eq!(c.ncols(), ds.schema.k_expanded());
    assert_eq!(m.predict_end_to_end(x).unwrap(), m.predict_target_from_concepts(c.view()).unwrap());
    let empty = Array2::<f64>::zeros((0, ds.input_dim()));
    assert_eq!(m.predict_end_to_end(empty.view()).unwrap().nrows(), 0);
    let wrong = Array2::<f64>::zeros((2, ds.input_dim() + 1));
    assert!(matches!(m.predict_end_to_end(wrong.view()), Err(CbmError::DimensionMismatch { .. })));
    assert!(m.predict_target_from_concepts(wrong.view()).is_err());
}

#[test]
fn invalid_config_rejected() {
    let (ds, split) = small_task(5);
    let mut cfg = small_config(0);
    cfg.epochs = 0;
    assert!(matches!(train_independent(&ds, &split, &cfg), Err(CbmError::Config { .. })));
    cfg = small_config(0);
    cfg.learning_rate = 0.0;
    assert!(train_joint(&ds, &split, 1.0, &cfg).is_err());
    assert!(train_joint(&ds, &split, -1.0, &small_config(0)).is_err());
    cfg = small_config(0);
    cfg.target_loss = Some(TargetLoss::CrossEntropy);
    assert!(train_joint(&ds, &split, 1.0, &cfg).is_err());
}

#[test]
fn divergence_is_reported() {
    let (ds, split) = small_task(6);
    let mut cfg = small_config(0);
    cfg.learning_rate = 1e200;
    match train_joint(&ds, &split, 1.0, &cfg) {
        Err(CbmError::Divergence { epoch, .. }) => assert!(epoch < cfg.epochs),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn rmse_fixture() {
    let pred = array![[1.0], [2.0], [2.0]];
    let truth = array![[0.0], [0.0], [0.0]];
    assert!((rmse(pred.view(), truth.view()) - 3f64.sqrt()).abs() < 1e-15);
}

#[test]
fn evaluate_perfect_classifier_concepts() {
    let (ds, split) = small_task(7);
    let m = train_independent(&ds, &split, &small_config(0)).unwrap();
    let metrics = m.evaluate(&ds, &split.test).unwrap();
    assert_eq!(metrics.n, split.test.len());
    assert!(metrics.target_rmse.unwrap() > 0.0);
    assert_eq!(metrics.per_group.len(), 2);
}

#[test]
fn checkpoint_roundtrip() {
    let (ds, split) = small_task(8);
    let m = train_sequential(&ds, &split, &small_config(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    m.save(&p).unwrap();
    let back = BottleneckModel::<f64>::load(&p).unwrap();
    assert_eq!(back, m);
    assert!(BottleneckModel::<f32>::load(&p).is_err());
    let bad = m.to_checkpoint_json().replace("\"format_version\":1", "\"format_version\":99");
    assert!(BottleneckModel::<f64>::from_checkpoint_json(&bad).is_err());
}

#[test]
fn default_lambda_by_task() {
    let oh = ConceptSchema::new(vec![ConceptGroup::new("a", 3)], Encoding::OneHot).unwrap();
    let sc = ConceptSchema::scalar(&["a"]).unwrap();
    assert_eq!(default_lambda(&oh, TaskKind::Classification), 0.01);
    assert_eq!(default_lambda(&sc, TaskKind::Regression), 1.0);
}
