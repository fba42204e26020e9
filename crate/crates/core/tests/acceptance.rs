// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p cbm-core --test acceptance -- 4 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use cbm_core::attribution::{
    concept_to_input_saliency, gradient_saliency, integrated_gradients, smoothgrad, AttributionParams,
    Attributor, BaselineSpec, Differentiable, InnerMethod, Method,
};
use cbm_core::data::{split_dataset, DataSplit};
use cbm_core::diagnostics::{default_alignment_params, oracle_alignment_report, SeedModels};
use cbm_core::models::{train_independent, train_independent_and_sequential, train_joint, TrainConfig, TrainingMode};
use cbm_core::nn::{Mlp, MlpSpec};
use cbm_core::pipeline::{run_pipeline, AlignmentSection, DataSource, ExperimentConfig, InterventionSection, SaliencySection, SweepSection};
use cbm_core::probes::{intervene, intervention_curve, oracle_predict, single_concept_sweep, InterventionOrdering, SweepConfig, SweepWidth};
use cbm_core::regularizers::{
    angular_diversification, build_extended_predictor, max_cross_mi, mine_mi_estimate, orthogonality_penalty,
    pairwise_mi_histogram, train_extended_joint, Binning, ExtendedBottleneckConfig, MiScope, RegularizerKind,
    StatisticsNetConfig,
};
use cbm_core::synth::{generate_task, SyntheticSpec};
use cbm_core::Dataset;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn task(spec: &SyntheticSpec) -> (Dataset, DataSplit) {
    let ds = generate_task::<f64>(spec, spec.seed).unwrap().dataset;
    let split = split_dataset(&ds, FRACTIONS, 0).unwrap();
    (ds, split)
}

fn leaky() -> (Dataset, DataSplit) {
    task(&SyntheticSpec::leaky(32, 4, 4000, 0.5, 0))
}

fn sweep_cfg() -> SweepConfig {
    SweepConfig { train: TrainConfig::default(), lambda: None, width: SweepWidth::Scalar, seeds: SEEDS.to_vec() }
}

/// Joint at least 10% below the oracle, independent within 0.05 of it, each in 80% of single-concept cells.
fn leakage_ordering() -> Outcome {
    let (ds, split) = leaky();
    let t = single_concept_sweep(&ds, &split, &sweep_cfg()).map_err(|e| e.to_string())?;
    let singles: Vec<&String> = t.columns.iter().filter(|c| c.as_str() != "all").collect();
    let mean = |row: &str, col: &str| t.cell(row, col).and_then(|c| c.mean).unwrap_or(f64::NAN);
    let (mut gap_ok, mut ind_ok) = (0, 0);
    for col in &singles {
        let oracle = mean("oracle", col);
        gap_ok += usize::from(mean("joint", col) <= 0.9 * oracle);
        ind_ok += usize::from((mean("independent", col) - oracle).abs() <= 0.05);
    }
    let need = (0.8 * singles.len() as f64).ceil() as usize;
    let detail = format!("joint gap cells {gap_ok}/{}, independent≈oracle cells {ind_ok}/{}", singles.len(), singles.len());
    ensure(gap_ok >= need && ind_ok >= need, || detail.clone())?;
    Ok(detail)
}

/// All-concepts oracle error at most 0.3 of the best single-concept oracle.
fn all_concepts_gap() -> Outcome {
    let (ds, split) = task(&SyntheticSpec::factorized(32, 4, 4000, 0));
    let t = single_concept_sweep(&ds, &split, &sweep_cfg()).map_err(|e| e.to_string())?;
    let all = t.cell("oracle", "all").and_then(|c| c.mean).ok_or("no all-concepts oracle")?;
    let best_single = t
        .columns
        .iter()
        .filter(|c| c.as_str() != "all")
        .filter_map(|c| t.cell("oracle", c).and_then(|c| c.mean))
        .fold(f64::INFINITY, f64::min);
    let detail = format!("all {all:.4} vs best single {best_single:.4} (ratio {:.3})", all / best_single);
    ensure(all <= 0.3 * best_single, || detail.clone())?;
    Ok(detail)
}

/// Mean R^2(oracle, sequential) above mean R^2(oracle, joint).
fn alignment_ordering() -> Outcome {
    let (ds, split) = leaky();
    let mut models = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig::default().with_seed(seed);
        let (i, s) = train_independent_and_sequential(&ds, &split, &cfg).map_err(|e| e.to_string())?;
        let j = train_joint(&ds, &split, 1.0, &cfg).map_err(|e| e.to_string())?;
        models.push((seed, i, s, j));
    }
    let runs: Vec<_> = models
        .iter()
        .map(|(seed, i, s, j)| SeedModels { seed: *seed, independent: i, sequential: s, joint: j })
        .collect();
    let rep = oracle_alignment_report(&runs, &ds, &split.test[..200], &default_alignment_params()).map_err(|e| e.to_string())?;
    let seq = rep.pair("oracle", "sequential").ok_or("missing sequential pair")?;
    let joint = rep.pair("oracle", "joint").ok_or("missing joint pair")?;
    ensure(seq.std_across_seeds.is_finite() && joint.std_across_seeds.is_finite(), || "std not reported".into())?;
    let detail = format!(
        "R2(oracle,seq) {:.3}±{:.3}, R2(oracle,joint) {:.3}±{:.3}",
        seq.mean_r2, seq.std_across_seeds, joint.mean_r2, joint.std_across_seeds
    );
    ensure(rep.sequential_beats_joint() == Some(true), || detail.clone())?;
    Ok(detail)
}

/// Empty intervention is the plain prediction, full intervention is the oracle, curves descend.
fn intervention_identities() -> Outcome {
    const EPS: f64 = 0.02;
    let (ds, split) = leaky();
    let test = ds.select(&split.test);
    let c_true = test.expanded_concepts();
    let mut worst_rise = f64::NEG_INFINITY;
    for seed in SEEDS {
        let cfg = TrainConfig::default().with_seed(seed);
        let m = train_independent(&ds, &split, &cfg).map_err(|e| e.to_string())?;
        let none = intervene(&m, test.inputs.view(), c_true.view(), &[]).map_err(|e| e.to_string())?;
        ensure(none == m.predict_end_to_end(test.inputs.view()).unwrap(), || format!("seed {seed}: empty intervention differs"))?;
        let all: Vec<usize> = (0..ds.schema.k_groups()).collect();
        let full = intervene(&m, test.inputs.view(), c_true.view(), &all).map_err(|e| e.to_string())?;
        ensure(full == oracle_predict(&m, c_true.view()).unwrap(), || format!("seed {seed}: full intervention differs from oracle"))?;
        let curve = intervention_curve(&m, &ds, &split.test, &InterventionOrdering::Random, &SEEDS).map_err(|e| e.to_string())?;
        for w in curve.points.windows(2) {
            worst_rise = worst_rise.max(w[1].mean_error - w[0].mean_error);
        }
    }
    let detail = format!("identities exact; largest curve rise {worst_rise:.4} (eps {EPS})");
    ensure(worst_rise <= EPS, || detail.clone())?;
    Ok(detail)
}

fn random_mlp(seed: u64, d: usize, out: usize) -> Mlp<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::new(&MlpSpec::new(d, &[16, 8], out), &mut rng).unwrap()
}

fn eval1(f: &Mlp<f64>, x: &Array1<f64>, index: usize) -> f64 {
    f.eval(x.view().insert_axis(Axis(0)), index).unwrap()[0]
}

/// IG completeness, linear IG, zero-noise SmoothGrad, finite-difference gradients.
fn attribution_properties() -> Outcome {
    const D: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let zero = Array1::zeros(D);
    let mut worst_completeness = 0.0f64;
    let mut worst_fd = 0.0f64;
    for i in 0..100u64 {
        let f = random_mlp(i % 10, D, 2);
        let x = Array1::from_shape_simple_fn(D, || rng.random_range(-2.0..2.0));
        let ig = integrated_gradients(&f, x.view(), zero.view(), 256, 0, 1e-3).map_err(|e| e.to_string())?;
        let delta = eval1(&f, &x, 0) - eval1(&f, &zero, 0);
        let rel = (ig.values.sum() - delta).abs() / delta.abs().max(1e-8);
        worst_completeness = worst_completeness.max(rel);

        let g = gradient_saliency(&f, x.view(), 1).map_err(|e| e.to_string())?;
        let h = 1e-6;
        for j in 0..D {
            let (mut p, mut q) = (x.clone(), x.clone());
            p[j] += h;
            q[j] -= h;
            let fd = (eval1(&f, &p, 1) - eval1(&f, &q, 1)) / (2.0 * h);
            worst_fd = worst_fd.max((fd - g.values[j]).abs() / fd.abs().max(1e-3));
        }

        for inner in [InnerMethod::Gradient, InnerMethod::IntegratedGradients] {
            let s = smoothgrad(inner, &f, x.view(), zero.view(), 32, 0.0, 5, i, 0).map_err(|e| e.to_string())?;
            let direct = match inner {
                InnerMethod::Gradient => gradient_saliency(&f, x.view(), 0),
                InnerMethod::IntegratedGradients => integrated_gradients(&f, x.view(), zero.view(), 32, 0, 1e-3),
            }
            .map_err(|e| e.to_string())?;
            ensure(s.values == direct.values, || format!("input {i}: zero-noise SmoothGrad differs from {inner:?}"))?;
        }
    }

    let mut worst_linear = 0.0f64;
    for i in 0..20 {
        let w = Array2::from_shape_simple_fn((D, 1), || rng.random_range(-3.0..3.0));
        let lin = Mlp::linear(w.clone(), Array1::from_elem(1, 0.7));
        let x = Array1::from_shape_simple_fn(D, || rng.random_range(-2.0..2.0));
        let b = Array1::from_shape_simple_fn(D, || rng.random_range(-1.0..1.0));
        let ig = integrated_gradients(&lin, x.view(), b.view(), 1 + i, 0, 1e-3).map_err(|e| e.to_string())?;
        let expect = &w.column(0) * &(&x - &b);
        worst_linear = worst_linear.max((&ig.values - &expect).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let detail = format!(
        "completeness {worst_completeness:.2e} (<1e-3), linear {worst_linear:.1e} (<1e-6), fd {worst_fd:.1e} (<1e-4), smoothgrad exact"
    );
    ensure(worst_completeness < 1e-3 && worst_linear < 1e-6 && worst_fd < 1e-4, || detail.clone())?;
    Ok(detail)
}

/// An accurate independent g puts 90% of each map's L1 mass on its concept's support.
fn saliency_concentration() -> Outcome {
    let spec = SyntheticSpec::factorized(32, 4, 20_000, 0);
    let (ds, split) = task(&spec);
    let cfg = TrainConfig { epochs: 300, learning_rate: 1e-3, batch_size: 256, patience: 20, ..TrainConfig::default() };
    let m = train_independent(&ds, &split, &cfg).map_err(|e| e.to_string())?;
    let rmse = m.evaluate(&ds, &split.test).map_err(|e| e.to_string())?.concept_rmse;
    ensure(rmse < 0.05, || format!("concept RMSE {rmse:.4} not below 0.05"))?;
    let params = AttributionParams { method: Method::IntegratedGradients, baseline: BaselineSpec::zeros(), ..Default::default() };
    let att = Attributor::new(&params, 32, None::<ArrayView2<f64>>).map_err(|e| e.to_string())?;
    let (mut hits, mut total) = (0usize, 0usize);
    for &r in &split.test[..200] {
        for g in 0..spec.k_groups() {
            let maps = concept_to_input_saliency(&m, ds.inputs.row(r), g, &att).map_err(|e| e.to_string())?;
            hits += usize::from(maps[0].mass_fraction(spec.concept_coordinates(g)) >= 0.9);
            total += 1;
        }
    }
    let frac = hits as f64 / total as f64;
    let detail = format!("concept RMSE {rmse:.4}; {hits}/{total} maps ({:.1}%) with >=90% mass on support", 100.0 * frac);
    ensure(frac >= 0.9, || detail.clone())?;
    Ok(detail)
}

fn gaussian_pair(rho: f64, n: usize, dim: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Array2::zeros((n, dim));
    let mut b = Array2::zeros((n, dim));
    for i in 0..n {
        for j in 0..dim {
            let u: f64 = StandardNormal.sample(&mut rng);
            let v: f64 = StandardNormal.sample(&mut rng);
            a[[i, j]] = u;
            b[[i, j]] = rho * u + (1.0 - rho * rho).sqrt() * v;
        }
    }
    (a, b)
}

/// MINE on correlated Gaussians, both estimators on independent blocks, histogram on a binary copy.
fn mi_oracles() -> Outcome {
    let mine = StatisticsNetConfig::default();
    let mut parts = Vec::new();
    for rho in [0.5, 0.8, 0.95] {
        let (a, b) = gaussian_pair(rho, 10_000, 1, 1);
        let truth = -0.5 * (1.0 - rho * rho).ln();
        let est = mine_mi_estimate(a.view(), b.view(), &mine).map_err(|e| e.to_string())?.estimate;
        parts.push(format!("rho {rho}: {est:.3}/{truth:.3}"));
        ensure((est - truth).abs() <= 0.2 * truth, || format!("MINE at rho {rho}: {est:.4} vs {truth:.4}"))?;
    }
    let (a, b) = gaussian_pair(0.0, 5000, 2, 2);
    let mine_ind = mine_mi_estimate(a.view(), b.view(), &mine).map_err(|e| e.to_string())?.estimate;
    let hist_ind = max_cross_mi(a.view(), b.view(), 8, Binning::EqualWidth).map_err(|e| e.to_string())?;
    parts.push(format!("independent MINE {mine_ind:.4} hist {hist_ind:.4}"));
    ensure(mine_ind < 0.05 && hist_ind < 0.05, || parts.join(", "))?;

    let bits = Array2::from_shape_fn((5000, 2), |(i, _)| (i % 2) as f64);
    let binary = pairwise_mi_histogram(bits.view(), 2, Binning::EqualWidth, MiScope::AllPairs, 0)
        .map_err(|e| e.to_string())?
        .matrix[[0, 1]];
    parts.push(format!("binary {binary:.4}"));
    ensure((binary - 2f64.ln()).abs() <= 0.02, || parts.join(", "))?;
    Ok(parts.join(", "))
}

fn fd_rel_error(a: &Array2<f64>, grad: &Array2<f64>, value: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for idx in ndarray::indices_of(a) {
        let (mut p, mut q) = (a.clone(), a.clone());
        p[idx] += h;
        q[idx] -= h;
        let fd = (value(&p) - value(&q)) / (2.0 * h);
        worst = worst.max((fd - grad[idx]).abs() / fd.abs().max(1e-3));
    }
    worst
}

/// Gradient checks, orthonormal fixture, and MI reduction among new units.
fn regularizer_behavior() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_fd = 0.0f64;
    for _ in 0..5 {
        let a = Array2::from_shape_simple_fn((5, 7), || rng.random_range(-1.0..1.0));
        for abs_cos in [false, true] {
            let (_, g) = angular_diversification(a.view(), 0.5, abs_cos).map_err(|e| e.to_string())?;
            worst_fd = worst_fd.max(fd_rel_error(&a, &g, |m| angular_diversification(m.view(), 0.5, abs_cos).unwrap().0.value));
        }
        let (_, g) = orthogonality_penalty(a.view()).map_err(|e| e.to_string())?;
        worst_fd = worst_fd.max(fd_rel_error(&a, &g, |m| orthogonality_penalty(m.view()).unwrap().0));
    }
    ensure(worst_fd < 1e-4, || format!("finite-difference rel. error {worst_fd:.2e}"))?;

    let eye = Array2::<f64>::eye(4);
    let (penalty, _) = orthogonality_penalty(eye.view()).map_err(|e| e.to_string())?;
    let (stats, _) = angular_diversification(eye.view(), 0.5, false).map_err(|e| e.to_string())?;
    ensure(penalty.abs() < 1e-12 && (stats.mean_angle - std::f64::consts::FRAC_PI_2).abs() < 1e-12, || {
        format!("orthonormal set: penalty {penalty}, mean angle {}", stats.mean_angle)
    })?;

    let (ds, split) = leaky();
    let ext = ExtendedBottleneckConfig::new(4, 8, RegularizerKind::PairwiseMiNew);
    let x = ds.select(&split.test).inputs;
    let mi = |z: Array2<f64>| pairwise_mi_histogram(z.view(), 8, Binning::EqualWidth, MiScope::NewOnly, 4).unwrap().sum;
    let mut decreased = 0;
    let mut trace = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig::default().with_seed(seed);
        let g0 = build_extended_predictor::<f64>(32, &ds.schema, &ext, &cfg).map_err(|e| e.to_string())?;
        let m = train_extended_joint(&ds, &split, &ext, 1.0, &cfg).map_err(|e| e.to_string())?;
        let (start, end) = (mi(g0.forward(x.view()).unwrap()), mi(m.g.forward(x.view()).unwrap()));
        decreased += usize::from(end < start);
        trace.push(format!("{start:.2}->{end:.2}"));
    }
    let detail = format!("fd {worst_fd:.1e}; orthonormal exact; MI decreased in {decreased}/5 seeds [{}]", trace.join(" "));
    ensure(decreased >= 4, || detail.clone())?;
    Ok(detail)
}

/// Rerunning from the emitted config snapshot reproduces every report and figure byte.
fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::new("determinism", DataSource::Leaky { d: 16, k: 3, n: 600, leak_strength: 0.5, seed: 3 });
    cfg.seeds = vec![0, 1];
    cfg.modes.push(TrainingMode::ExtendedJoint);
    cfg.train.epochs = 5;
    cfg.lambda_grid = vec![0.1, 1.0];
    cfg.sweep = Some(SweepSection::default());
    cfg.interventions = Some(InterventionSection::default());
    cfg.alignment = Some(AlignmentSection { max_rows: 30, ..Default::default() });
    cfg.saliency = Some(SaliencySection { rows: 4, ..Default::default() });
    cfg.extended = Some(ExtendedBottleneckConfig::new(3, 6, RegularizerKind::PairwiseMiNew));
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_pipeline(&cfg, a.path()).map_err(|e| e.to_string())?;
    let snapshot = ExperimentConfig::load(&first.run_dir.join("config.toml")).map_err(|e| e.to_string())?;
    let second = run_pipeline(&snapshot, b.path()).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for sub in ["", "dataset", "figures", "maps", "models/seed-0", "models/seed-1"] {
        for entry in std::fs::read_dir(first.run_dir.join(sub)).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            if path.is_dir() || name == "manifest.json" {
                continue;
            }
            let other = second.run_dir.join(sub).join(&name);
            ensure(std::fs::read(&path).ok() == std::fs::read(&other).ok(), || format!("{sub}/{name} differs"))?;
            compared += 1;
        }
    }
    ensure(first.run_dir.file_name() == second.run_dir.file_name(), || "run directory names differ".into())?;
    Ok(format!("{compared} artifacts bit-identical"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "leakage ordering", leakage_ordering),
        (2, "all-concepts gap", all_concepts_gap),
        (3, "alignment ordering", alignment_ordering),
        (4, "intervention identities", intervention_identities),
        (5, "attribution properties", attribution_properties),
        (6, "saliency concentration", saliency_concentration),
        (7, "MI oracles", mi_oracles),
        (8, "regularizer behavior", regularizer_behavior),
        (9, "determinism", determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
