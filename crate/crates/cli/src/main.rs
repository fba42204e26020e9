// SPDX-License-Identifier: MIT OR Apache-2.0

//! `cbm`: train concept bottleneck models and audit them for leakage.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use cbm_core::attribution::{
    aggregate_group_saliency, concept_to_input_saliency, target_to_concept_importance, Aggregation,
    AttributionParams, Attributor, Method,
};
use cbm_core::data::{split_dataset, DataSplit, SplitPart};
use cbm_core::diagnostics::{default_alignment_params, oracle_alignment};
use cbm_core::error::{CbmError, Result};
use cbm_core::io::{load_dataset_dir, read_text, save_dataset, write_text};
use cbm_core::models::{
    train_independent, train_joint, train_sequential, BottleneckModel, TrainConfig, TrainingMode,
};
use cbm_core::pipeline::{render_markdown, run_pipeline, DiagnosticsReport, ExperimentConfig};
use cbm_core::probes::{intervene, intervention_curve, single_concept_sweep, InterventionOrdering, SweepConfig, SweepWidth};
use cbm_core::regularizers::{train_extended_joint, ExtendedBottleneckConfig};
use cbm_core::render::{render_saliency_grid, save_png, GridLayout, SaliencyGridRow};
use cbm_core::synth::{generate_task, SyntheticSpec};

#[derive(Parser)]
#[command(name = "cbm", version, about = "Concept bottleneck training and leakage auditing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train one bottleneck model (independent, sequential or joint).
    Train(TrainArgs),
    /// Train a joint model with extra unsupervised bottleneck units.
    TrainExtended(TrainExtendedArgs),
    /// Single-concept leakage sweep over all training modes.
    Sweep(SweepArgs),
    /// Replace predicted concept groups with ground truth, or trace an intervention curve.
    Intervene(InterveneArgs),
    /// Saliency of a concept group over inputs, or of the target over concepts.
    Attribute(AttributeArgs),
    /// Concept-space saliency agreement with the oracle.
    Align(AlignArgs),
    /// Re-render report.md from a run's report.json.
    Report(ReportArgs),
    /// Full pipeline from an experiment config.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (TOML); overrides the preset flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    /// Share of target variance no concept explains.
    #[arg(long, default_value_t = 0.0)]
    leak: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (as written by `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Train/validation/test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<(cbm_core::Dataset, DataSplit)> {
        let ds = load_dataset_dir(&self.data)?;
        let split = split_dataset(&ds, (self.split[0], self.split[1], self.split[2]), self.split_seed)?;
        Ok((ds, split))
    }
}

#[derive(Args)]
struct TrainFlags {
    /// Training config (TOML); its keys override these flags.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    learning_rate: f64,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            ..TrainConfig::default()
        };
        layered(base, self.train_config.as_deref())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Independent,
    Sequential,
    Joint,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Joint concept-loss weight; task default when omitted.
    #[arg(long)]
    lambda: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainExtendedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Extended bottleneck config (TOML).
    #[arg(long)]
    extended: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = WidthArg::Scalar)]
    width: WidthArg,
    #[arg(long)]
    lambda: Option<f64>,
    /// Sweep table JSON path; printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WidthArg {
    Scalar,
    Cardinality,
}

#[derive(Args)]
struct InterveneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Groups to correct (indices).
    #[arg(long, value_delimiter = ',')]
    groups: Vec<usize>,
    /// Trace the error as groups are corrected one by one instead.
    #[arg(long)]
    curve: bool,
    /// Fixed group order for the curve; random per seed when omitted.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttributeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Dataset row to explain.
    #[arg(long)]
    row: usize,
    /// Concept group to explain over inputs; target over concepts when omitted.
    #[arg(long)]
    group: Option<usize>,
    /// Target output index for target-over-concept attribution.
    #[arg(long, default_value_t = 0)]
    target: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Ig)]
    method: MethodArg,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Attribution params (TOML); its keys override these flags.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Also render the saliency grid for a concept group.
    #[arg(long)]
    png: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gradient,
    Ig,
    Smoothgrad,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Independently trained model supplying the oracle.
    #[arg(long)]
    oracle: PathBuf,
    /// Models compared with the oracle and with each other.
    #[arg(long, required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    /// Leading test rows used; all when 0.
    #[arg(long, default_value_t = 200)]
    rows: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); see configs/leaky-demo.toml.
    #[arg(long)]
    config: PathBuf,
    /// Output root; the config's output_dir wins, then this flag, then CBM_OUTPUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `base` with every key present in the TOML file at `file` replaced.
fn layered<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else { return Ok(base) };
    let text = read_text(path)?;
    let over: toml::Table = toml::from_str(&text).map_err(|e| CbmError::config(path.display().to_string(), e.to_string()))?;
    let mut merged = serde_json::to_value(&base)?;
    let obj = merged.as_object_mut().expect("config serializes to an object");
    for (k, v) in over {
        if !obj.contains_key(&k) {
            return Err(CbmError::config(k, format!("unknown key in {}", path.display())));
        }
        obj.insert(k, serde_json::to_value(v)?);
    }
    serde_json::from_value(merged).map_err(|e| CbmError::config(path.display().to_string(), e.to_string()))
}

fn emit<S: Serialize>(value: &S, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => write_text(p, &json),
        None => print_stdout(&json),
    }
}

/// A closed pipe (`cbm ... | head`) is not an error.
fn print_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CbmError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| CbmError::config(path.display().to_string(), e.to_string()))
}

fn check_lineage(model: &BottleneckModel<f64>, ds: &cbm_core::Dataset) -> Result<()> {
    let fp = ds.fingerprint();
    if model.dataset_fingerprint != fp {
        return Err(CbmError::Lineage(format!(
            "model was trained on dataset {}, this dataset is {fp}",
            model.dataset_fingerprint
        )));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => load_toml::<SyntheticSpec>(p)?,
        None => SyntheticSpec::leaky(a.d, a.k, a.n, a.leak, a.seed),
    };
    let task = generate_task::<f64>(&spec, spec.seed)?;
    save_dataset(&a.out, &task.dataset)?;
    eprintln!("wrote {} rows to {}", task.dataset.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let cfg = a.train.resolve()?;
    let lambda = a.lambda.unwrap_or_else(|| cbm_core::models::default_lambda(&ds.schema, ds.task_kind));
    let model = match a.mode {
        ModeArg::Independent => train_independent(&ds, &split, &cfg)?,
        ModeArg::Sequential => train_sequential(&ds, &split, &cfg)?,
        ModeArg::Joint => train_joint(&ds, &split, lambda, &cfg)?,
    };
    model.save(&a.out)?;
    emit(&model.evaluate(&ds, &split.test)?, None)
}

fn train_extended(a: TrainExtendedArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let cfg = a.train.resolve()?;
    let ext: ExtendedBottleneckConfig = load_toml(&a.extended)?;
    let lambda = a.lambda.unwrap_or_else(|| cbm_core::models::default_lambda(&ds.schema, ds.task_kind));
    let model = train_extended_joint(&ds, &split, &ext, lambda, &cfg)?;
    model.save(&a.out)?;
    emit(&model.evaluate(&ds, &split.test)?, None)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let cfg = SweepConfig {
        train: a.train.resolve()?,
        lambda: a.lambda,
        width: match a.width {
            WidthArg::Scalar => SweepWidth::Scalar,
            WidthArg::Cardinality => SweepWidth::Cardinality,
        },
        seeds: a.seeds,
    };
    emit(&single_concept_sweep(&ds, &split, &cfg)?, a.out.as_deref())
}

fn intervene_cmd(a: InterveneArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let model = BottleneckModel::<f64>::load(&a.model)?;
    check_lineage(&model, &ds)?;
    let rows = split.part(SplitPart::Test);
    if a.curve {
        let ordering = match a.order {
            Some(o) => InterventionOrdering::Fixed(o),
            None => InterventionOrdering::Random,
        };
        return emit(&intervention_curve(&model, &ds, rows, &ordering, &a.seeds)?, a.out.as_deref());
    }
    let test = ds.select(rows);
    let out = intervene(&model, test.inputs.view(), test.expanded_concepts().view(), &a.groups)?;
    #[derive(Serialize)]
    struct Intervened {
        groups: Vec<usize>,
        rows: Vec<usize>,
        target_error: f64,
        predictions: Vec<f64>,
    }
    emit(
        &Intervened {
            groups: a.groups,
            rows: rows.to_vec(),
            target_error: model.target_error(out.view(), test.targets.view()),
            predictions: model.predict_labels(out.view()).to_vec(),
        },
        a.out.as_deref(),
    )
}

fn attribute(a: AttributeArgs) -> Result<()> {
    let (ds, _) = a.data.load()?;
    let model = BottleneckModel::<f64>::load(&a.model)?;
    check_lineage(&model, &ds)?;
    if a.row >= ds.len() {
        return Err(CbmError::Invalid(format!("row {} out of range ({} rows)", a.row, ds.len())));
    }
    let base = AttributionParams {
        method: match a.method {
            MethodArg::Gradient => Method::Gradient,
            MethodArg::Ig => Method::IntegratedGradients,
            MethodArg::Smoothgrad => Method::SmoothGrad,
        },
        steps: a.steps,
        ..AttributionParams::default()
    };
    let params = layered(base, a.params.as_deref())?;
    let x = ds.inputs.row(a.row);
    match a.group {
        Some(g) => {
            let att = Attributor::new(&params, ds.input_dim(), Some(ds.inputs.view()))?;
            let maps = concept_to_input_saliency(&model, x, g, &att)?;
            let agg = aggregate_group_saliency(&maps, None, Aggregation::Mean)?;
            if let Some(png) = &a.png {
                let row = SaliencyGridRow {
                    input: x.to_owned(),
                    maps: maps.iter().map(|m| m.values.clone()).collect(),
                    aggregate: agg.values.clone(),
                };
                save_png(&render_saliency_grid(&[row], &GridLayout::default())?, png)?;
            }
            #[derive(Serialize)]
            struct GroupMaps {
                maps: Vec<cbm_core::attribution::SaliencyMap>,
                aggregate: cbm_core::attribution::SaliencyMap,
            }
            emit(&GroupMaps { maps, aggregate: agg }, a.out.as_deref())
        }
        None => {
            let c = model.predict_concepts(x.insert_axis(ndarray::Axis(0)))?;
            let att = Attributor::new(&params, c.ncols(), None)?;
            let map = target_to_concept_importance(&model, c.row(0), a.target, &att)?;
            emit(&map, a.out.as_deref())
        }
    }
}

fn align(a: AlignArgs) -> Result<()> {
    let (ds, split) = a.data.load()?;
    let oracle = BottleneckModel::<f64>::load(&a.oracle)?;
    if oracle.mode != TrainingMode::Independent {
        eprintln!("warning: oracle model was trained in {} mode", oracle.mode.name());
    }
    let models = a
        .models
        .iter()
        .map(|p| BottleneckModel::<f64>::load(p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&BottleneckModel<f64>> = models.iter().collect();
    let rows = if a.rows == 0 { &split.test[..] } else { &split.test[..a.rows.min(split.test.len())] };
    let stats = oracle_alignment(&oracle, &refs, &ds, rows, &default_alignment_params())?;
    emit(&stats, a.out.as_deref())
}

fn report(a: ReportArgs) -> Result<()> {
    let r = DiagnosticsReport::from_json(&read_text(&a.run.join("report.json"))?)?;
    let md = render_markdown(&r);
    write_text(&a.run.join("report.md"), &md)?;
    print_stdout(md.trim_end())
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let root = cfg.output_root(a.out.as_deref());
    let out = run_pipeline(&cfg, &root)?;
    print_stdout(&out.run_dir.display().to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::TrainExtended(a) => train_extended(a),
        Command::Sweep(a) => sweep(a),
        Command::Intervene(a) => intervene_cmd(a),
        Command::Attribute(a) => attribute(a),
        Command::Align(a) => align(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
