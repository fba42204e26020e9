// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent, sequential and joint training.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::predictor::{ConceptCache, ConceptPredictor, TargetPredictor};
use super::{BottleneckModel, EpochRecord, PhaseSummary, TrainingLog, TrainingMode};
use crate::data::{ConceptDataset, ConceptSchema, DataSplit, Encoding, TaskKind, UnitKind};
use crate::error::{CbmError, Result};
use crate::nn::{loss, Activation, Adam, AdamConfig, ParamGrads};
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptLoss {
    Mse,
    /// Softmax cross-entropy on each categorical slice; real units use squared error.
    PerGroupCrossEntropy,
}

impl ConceptLoss {
    pub fn default_for(schema: &ConceptSchema) -> Self {
        match schema.encoding() {
            Encoding::OneHot => ConceptLoss::PerGroupCrossEntropy,
            Encoding::Scalar => ConceptLoss::Mse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLoss {
    Mse,
    CrossEntropy,
}

impl TargetLoss {
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Regression => TargetLoss::Mse,
            TaskKind::Classification => TargetLoss::CrossEntropy,
        }
    }
}

/// Default joint weight: 0.01 for one-hot classification tasks, 1 otherwise.
pub fn default_lambda(schema: &ConceptSchema, task: TaskKind) -> f64 {
    if schema.encoding() == Encoding::OneHot && task == TaskKind::Classification {
        0.01
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `None` picks the loss matching the schema encoding.
    pub concept_loss: Option<ConceptLoss>,
    /// `None` picks the loss matching the task kind.
    pub target_loss: Option<TargetLoss>,
    pub g_hidden: Vec<usize>,
    pub f_hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement and
    /// restore the best parameters. 0 trains for all epochs.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            concept_loss: None,
            target_loss: None,
            g_hidden: vec![64, 64],
            f_hidden: vec![32],
            activation: Activation::Tanh,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            epochs: 60,
            batch_size: 64,
            seed: 0,
            patience: 8,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CbmError::config("epochs", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(CbmError::config("learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(CbmError::config("batch_size", "must be >= 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(CbmError::config("weight_decay", "must be >= 0"));
        }
        if self.g_hidden.contains(&0) || self.f_hidden.contains(&0) {
            return Err(CbmError::config("hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::new(self.learning_rate)
        }
    }

    fn target_loss_for(&self, task: TaskKind) -> Result<TargetLoss> {
        let l = self.target_loss.unwrap_or(TargetLoss::default_for(task));
        match (l, task) {
            (TargetLoss::Mse, TaskKind::Regression)
            | (TargetLoss::CrossEntropy, TaskKind::Classification) => Ok(l),
            _ => Err(CbmError::config(
                "target_loss",
                format!("{l:?} does not fit a {task:?} task"),
            )),
        }
    }
}

pub(crate) const STREAM_G_INIT: u64 = 1;
pub(crate) const STREAM_G_SHUFFLE: u64 = 2;
pub(crate) const STREAM_F_INIT: u64 = 3;
pub(crate) const STREAM_F_SHUFFLE: u64 = 4;
pub(crate) const STREAM_JOINT_SHUFFLE: u64 = 5;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Concept loss summed over groups and averaged over rows, with its gradient
/// w.r.t. the predictor's raw outputs (extra units receive zero gradient).
pub fn concept_loss<T: Scalar>(
    g: &ConceptPredictor<T>,
    kind: ConceptLoss,
    raw: ArrayView2<T>,
    activated: ArrayView2<T>,
    truth: ArrayView2<T>,
) -> (T, Array2<T>) {
    let schema = &g.schema;
    let n = T::of(raw.nrows().max(1) as f64);
    let two = T::of(2.0);
    let mut total = T::zero();
    let mut d_act = Array2::zeros(raw.raw_dim());
    let mut d_raw = Array2::zeros(raw.raw_dim());
    for grp in 0..schema.k_groups() {
        let r = schema.slice(grp);
        let categorical_ce =
            schema.unit_kind(grp) == UnitKind::Categorical && kind == ConceptLoss::PerGroupCrossEntropy;
        for row in 0..raw.nrows() {
            if categorical_ce {
                let logits = raw.slice(s![row, r.clone()]);
                let lse = log_sum_exp(logits.iter().copied());
                let tr = truth.slice(s![row, r.clone()]);
                let label = crate::data::argmax(tr.iter().copied());
                total += lse - logits[label];
                for (j, u) in r.clone().enumerate() {
                    let p = (logits[j] - lse).exp();
                    let y = if j == label { T::one() } else { T::zero() };
                    d_raw[[row, u]] = (p - y) / n;
                }
            } else {
                for u in r.clone() {
                    let diff = activated[[row, u]] - truth[[row, u]];
                    total += diff * diff;
                    d_act[[row, u]] = two * diff / n;
                }
            }
        }
    }
    let d = g.activation_backward(activated, d_act.view()) + d_raw;
    (total / n, d)
}

/// Target loss and its gradient w.r.t. `f`'s outputs.
pub fn target_loss<T: Scalar>(kind: TargetLoss, out: ArrayView2<T>, y: ArrayView1<T>) -> (T, Array2<T>) {
    match kind {
        TargetLoss::Mse => {
            let yt = y.view().insert_axis(Axis(1));
            loss::mse(out, yt)
        }
        TargetLoss::CrossEntropy => loss::softmax_cross_entropy(out, y),
    }
}

#[derive(Default, Clone, Copy)]
pub(crate) struct BatchLoss {
    pub target: Option<f64>,
    pub concept: Option<f64>,
    pub reg: Option<f64>,
}

/// Minibatch loop with per-epoch logging, divergence detection and early stopping.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_loop<S: Clone>(
    state: &mut S,
    n_train: usize,
    cfg: &TrainConfig,
    shuffle: &mut ChaCha8Rng,
    phase: &str,
    log: &mut TrainingLog,
    mut begin_epoch: impl FnMut(&mut S, usize) -> Result<Option<f64>>,
    mut step: impl FnMut(&mut S, &[usize]) -> Result<BatchLoss>,
    mut validate: impl FnMut(&S) -> Result<Option<f64>>,
) -> Result<()> {
    if n_train == 0 {
        return Err(CbmError::Split("training split is empty".into()));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut best: Option<(f64, usize, S)> = None;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let mi = begin_epoch(state, epoch)?;
        order.shuffle(shuffle);
        let mut sums = [0.0f64; 3];
        let mut seen = [false; 3];
        for batch in order.chunks(cfg.batch_size) {
            let bl = step(state, batch)?;
            let w = batch.len() as f64;
            for (i, v) in [bl.target, bl.concept, bl.reg].into_iter().enumerate() {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(CbmError::Divergence {
                            epoch,
                            message: format!("{phase}: non-finite batch loss"),
                        });
                    }
                    sums[i] += v * w;
                    seen[i] = true;
                }
            }
        }
        let avg = |i: usize| seen[i].then(|| sums[i] / n_train as f64);
        let val = validate(state)?;
        if let Some(v) = val {
            if !v.is_finite() {
                return Err(CbmError::Divergence {
                    epoch,
                    message: format!("{phase}: non-finite validation loss"),
                });
            }
        }
        log.entries.push(EpochRecord {
            phase: phase.to_string(),
            epoch,
            target_loss: avg(0),
            concept_loss: avg(1),
            reg_loss: avg(2),
            mi_estimate: mi,
            val_loss: val,
        });
        epochs_run = epoch + 1;
        if let (p @ 1.., Some(v)) = (cfg.patience, val) {
            let improved = best.as_ref().map_or(true, |(b, _, _)| v < *b);
            if improved {
                best = Some((v, epoch, state.clone()));
            } else if epoch - best.as_ref().unwrap().1 > p {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, s)) => {
            *state = s;
            e
        }
        None => epochs_run - 1,
    };
    log.phases.push(PhaseSummary {
        phase: phase.to_string(),
        epochs_run,
        best_epoch,
    });
    Ok(())
}

fn rows<T: Scalar>(a: &Array2<T>, idx: &[usize]) -> Array2<T> {
    a.select(Axis(0), idx)
}

fn rows1<T: Scalar>(a: &Array1<T>, idx: &[usize]) -> Array1<T> {
    a.select(Axis(0), idx)
}

/// Fit `g` alone on the concept loss, early-stopping on validation concept loss.
pub fn fit_concept_predictor<T: Scalar>(
    dataset: &ConceptDataset<T>,
    split: &DataSplit,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<ConceptPredictor<T>> {
    cfg.validate()?;
    split.validate(dataset.len())?;
    let kind = cfg.concept_loss.unwrap_or(ConceptLoss::default_for(&dataset.schema));
    let g = ConceptPredictor::new(
        dataset.input_dim(),
        &cfg.g_hidden,
        cfg.activation,
        &dataset.schema,
        0,
        &mut stream_rng(cfg.seed, STREAM_G_INIT),
    )?;
    let truth = dataset.expanded_concepts();
    let x_tr = rows(&dataset.inputs, &split.train);
    let c_tr = rows(&truth, &split.train);
    let x_val = rows(&dataset.inputs, &split.val);
    let c_val = rows(&truth, &split.val);
    let mut state = (g, Adam::new(cfg.adam()));
    fit_loop(
        &mut state,
        split.train.len(),
        cfg,
        &mut stream_rng(cfg.seed, STREAM_G_SHUFFLE),
        "g",
        log,
        |_, _| Ok(None),
        |(g, opt), batch| {
            let xb = rows(&x_tr, batch);
            let cb = rows(&c_tr, batch);
            let cache = g.forward_cached(xb.view())?;
            let (l, d_raw) = concept_loss(g, kind, cache.raw.view(), cache.activated.view(), cb.view());
            let (grads, _) = g.backward_raw(&cache, d_raw.view(), &[]);
            opt.step(g.params_mut(), &grads);
            Ok(BatchLoss {
                concept: Some(l.as_f64()),
                ..Default::default()
            })
        },
        |(g, _)| {
            if x_val.nrows() == 0 {
                return Ok(None);
            }
            let cache = g.forward_cached(x_val.view())?;
            let (l, _) = concept_loss(g, kind, cache.raw.view(), cache.activated.view(), c_val.view());
            Ok(Some(l.as_f64()))
        },
    )?;
    Ok(state.0)
}

/// Fit `f` on fixed concept-layer inputs (ground truth or frozen predictions).
#[allow(clippy::too_many_arguments)]
pub fn fit_target_predictor<T: Scalar>(
    c_train: &Array2<T>,
    y_train: &Array1<T>,
    c_val: &Array2<T>,
    y_val: &Array1<T>,
    task: TaskKind,
    outputs: usize,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<TargetPredictor<T>> {
    cfg.validate()?;
    let kind = cfg.target_loss_for(task)?;
    let f = TargetPredictor::new(
        c_train.ncols(),
        &cfg.f_hidden,
        cfg.activation,
        task,
        outputs,
        &mut stream_rng(cfg.seed, STREAM_F_INIT),
    )?;
    let mut state = (f, Adam::new(cfg.adam()));
    fit_loop(
        &mut state,
        c_train.nrows(),
        cfg,
        &mut stream_rng(cfg.seed, STREAM_F_SHUFFLE),
        "f",
        log,
        |_, _| Ok(None),
        |(f, opt), batch| {
            let cb = rows(c_train, batch);
            let yb = rows1(y_train, batch);
            let cache = f.net.forward_cached(cb.view());
            let (l, d) = target_loss(kind, cache.output.view(), yb.view());
            let (grads, _) = f.net.backward(&cache, d.view());
            opt.step(f.net.params_mut(), &grads);
            Ok(BatchLoss {
                target: Some(l.as_f64()),
                ..Default::default()
            })
        },
        |(f, _)| {
            if c_val.nrows() == 0 {
                return Ok(None);
            }
            let out = f.net.forward(c_val.view());
            Ok(Some(target_loss(kind, out.view(), y_val.view()).0.as_f64()))
        },
    )?;
    Ok(state.0)
}

/// `g` fit to ground-truth concepts, `f` fit on ground-truth concepts.
pub fn train_independent<T: Scalar>(
    dataset: &ConceptDataset<T>,
    split: &DataSplit,
    cfg: &TrainConfig,
) -> Result<BottleneckModel<T>> {
    let mut log = TrainingLog::default();
    let g = fit_concept_predictor(dataset, split, cfg, &mut log)?;
    let truth = dataset.expanded_concepts();
    let f = fit_target_predictor(
        &rows(&truth, &split.train),
        &rows1(&dataset.targets, &split.train),
        &rows(&truth, &split.val),
        &rows1(&dataset.targets, &split.val),
        dataset.task_kind,
        dataset.target_dim(),
        cfg,
        &mut log,
    )?;
    Ok(BottleneckModel::assemble(g, f, dataset, TrainingMode::Independent, None, log))
}

/// Same `g` as [`train_independent`]; `f` fit on `g`'s predictions.
pub fn train_sequential<T: Scalar>(
    dataset: &ConceptDataset<T>,
    split: &DataSplit,
    cfg: &TrainConfig,
) -> Result<BottleneckModel<T>> {
    let mut log = TrainingLog::default();
    let g = fit_concept_predictor(dataset, split, cfg, &mut log)?;
    let c_tr = g.forward(rows(&dataset.inputs, &split.train).view())?;
    let c_val = g.forward(rows(&dataset.inputs, &split.val).view())?;
    let f = fit_target_predictor(
        &c_tr,
        &rows1(&dataset.targets, &split.train),
        &c_val,
        &rows1(&dataset.targets, &split.val),
        dataset.task_kind,
        dataset.target_dim(),
        cfg,
        &mut log,
    )?;
    Ok(BottleneckModel::assemble(g, f, dataset, TrainingMode::Sequential, None, log))
}

/// Both models from one concept predictor fit; equal to calling
/// [`train_independent`] and [`train_sequential`] separately.
pub fn train_independent_and_sequential<T: Scalar>(
    dataset: &ConceptDataset<T>,
    split: &DataSplit,
    cfg: &TrainConfig,
) -> Result<(BottleneckModel<T>, BottleneckModel<T>)> {
    let mut g_log = TrainingLog::default();
    let g = fit_concept_predictor(dataset, split, cfg, &mut g_log)?;
    let truth = dataset.expanded_concepts();
    let y_tr = rows1(&dataset.targets, &split.train);
    let y_val = rows1(&dataset.targets, &split.val);
    let mut ind_log = g_log.clone();
    let f_ind = fit_target_predictor(
        &rows(&truth, &split.train),
        &y_tr,
        &rows(&truth, &split.val),
        &y_val,
        dataset.task_kind,
        dataset.target_dim(),
        cfg,
        &mut ind_log,
    )?;
    let mut seq_log = g_log;
    let c_tr = g.forward(rows(&dataset.inputs, &split.train).view())?;
    let c_val = g.forward(rows(&dataset.inputs, &split.val).view())?;
    let f_seq = fit_target_predictor(&c_tr, &y_tr, &c_val, &y_val, dataset.task_kind, dataset.target_dim(), cfg, &mut seq_log)?;
    Ok((
        BottleneckModel::assemble(g.clone(), f_ind, dataset, TrainingMode::Independent, None, ind_log),
        BottleneckModel::assemble(g, f_seq, dataset, TrainingMode::Sequential, None, seq_log),
    ))
}

/// Extra loss term hooked into joint training.
pub trait JointRegularizer<T: Scalar> {
    /// Called before each epoch with the current concept predictor and the
    /// training inputs; may return an MI estimate to log.
    fn begin_epoch(&mut self, epoch: usize, g: &ConceptPredictor<T>, x_train: ArrayView2<T>) -> Result<Option<f64>>;

    /// Unweighted regularizer value and gradients for one batch.
    fn batch(&mut self, g: &ConceptPredictor<T>, cache: &ConceptCache<T>) -> Result<RegTerm<T>>;
}

/// Regularizer gradients, all optional.
pub struct RegTerm<T> {
    pub loss: T,
    /// W.r.t. concept-layer values (`N x output_dim`).
    pub d_activated: Option<Array2<T>>,
    /// Directly w.r.t. `g`'s parameters, in `params_mut` order.
    pub d_params: Option<ParamGrads<T>>,
    /// Per-branch hidden-layer injections `(layer index, gradient)`.
    pub injections: Vec<Vec<(usize, Array2<T>)>>,
}

/// Combined loss terms and gradients for one batch, `g`'s parameters first.
/// `truth` holds the supervised concept columns only.
#[allow(clippy::too_many_arguments)]
pub(crate) fn joint_batch<'r, T: Scalar>(
    g: &ConceptPredictor<T>,
    f: &TargetPredictor<T>,
    x: ArrayView2<T>,
    truth: ArrayView2<T>,
    y: ArrayView1<T>,
    lambda: f64,
    ckind: ConceptLoss,
    tkind: TargetLoss,
    reg: Option<(&mut (dyn JointRegularizer<T> + 'r), f64)>,
) -> Result<(BatchLoss, ParamGrads<T>)> {
    let gc = g.forward_cached(x)?;
    let fc = f.net.forward_cached(gc.activated.view());
    let (lt, d_out) = target_loss(tkind, fc.output.view(), y);
    let (f_grads, mut d_act) = f.net.backward(&fc, d_out.view());
    let (lc, d_raw_c) = concept_loss(g, ckind, gc.raw.view(), gc.activated.view(), truth);
    let d_raw_c = d_raw_c * T::of(lambda);
    let mut reg_loss = None;
    let mut injections = Vec::new();
    let mut extra_param_grads = None;
    if let Some((r, w)) = reg {
        let term = r.batch(g, &gc)?;
        let w = T::of(w);
        reg_loss = Some(term.loss.as_f64());
        if let Some(d) = term.d_activated {
            d_act = d_act + d * w;
        }
        injections = term
            .injections
            .into_iter()
            .map(|v| v.into_iter().map(|(l, a)| (l, a * w)).collect())
            .collect();
        extra_param_grads = term.d_params.map(|gs| {
            gs.into_iter()
                .map(|v| v.into_iter().map(|x| x * w).collect())
                .collect::<Vec<Vec<T>>>()
        });
    }
    let d_raw = g.activation_backward(gc.activated.view(), d_act.view()) + d_raw_c;
    let (mut grads, _) = g.backward_raw(&gc, d_raw.view(), &injections);
    if let Some(extra) = extra_param_grads {
        for (a, b) in grads.iter_mut().zip(extra) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    grads.extend(f_grads);
    Ok((
        BatchLoss {
            target: Some(lt.as_f64()),
            concept: Some(lc.as_f64()),
            reg: reg_loss,
        },
        grads,
    ))
}

/// Optimise `g` and `f` together on `L_t + lambda L_c (+ reg_weight L_r)`,
/// early-stopping on validation target loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_joint<T: Scalar>(
    g: ConceptPredictor<T>,
    dataset: &ConceptDataset<T>,
    split: &DataSplit,
    lambda: f64,
    cfg: &TrainConfig,
    reg: Option<(&mut dyn JointRegularizer<T>, f64)>,
    phase: &str,
    log: &mut TrainingLog,
) -> Result<(ConceptPredictor<T>, TargetPredictor<T>)> {
    cfg.validate()?;
    split.validate(dataset.len())?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(CbmError::config("lambda", "must be finite and >= 0"));
    }
    let ckind = cfg.concept_loss.unwrap_or(ConceptLoss::default_for(&dataset.schema));
    let tkind = cfg.target_loss_for(dataset.task_kind)?;
    let f = TargetPredictor::new(
        g.output_dim(),
        &cfg.f_hidden,
        cfg.activation,
        dataset.task_kind,
        dataset.target_dim(),
        &mut stream_rng(cfg.seed, STREAM_F_INIT),
    )?;
    let truth = dataset.expanded_concepts();
    let x_tr = rows(&dataset.inputs, &split.train);
    let c_tr = rows(&truth, &split.train);
    let y_tr = rows1(&dataset.targets, &split.train);
    let x_val = rows(&dataset.inputs, &split.val);
    let y_val = rows1(&dataset.targets, &split.val);
    let reg = std::cell::RefCell::new(reg);
    let mut state = (g, f, Adam::new(cfg.adam()));
    fit_loop(
        &mut state,
        split.train.len(),
        cfg,
        &mut stream_rng(cfg.seed, STREAM_JOINT_SHUFFLE),
        phase,
        log,
        |(g, _, _), epoch| match reg.borrow_mut().as_mut() {
            Some((r, _)) => r.begin_epoch(epoch, g, x_tr.view()),
            None => Ok(None),
        },
        |(g, f, opt), batch| {
            let xb = rows(&x_tr, batch);
            let cb = rows(&c_tr, batch);
            let yb = rows1(&y_tr, batch);
            let mut r = reg.borrow_mut();
            let r = r.as_mut().map(|(r, w)| (&mut **r, *w));
            let (bl, grads) = joint_batch(g, f, xb.view(), cb.view(), yb.view(), lambda, ckind, tkind, r)?;
            let mut params = g.params_mut();
            params.extend(f.net.params_mut());
            opt.step(params, &grads);
            Ok(bl)
        },
        |(g, f, _)| {
            if x_val.nrows() == 0 {
                return Ok(None);
            }
            let c = g.forward(x_val.view())?;
            let out = f.net.forward(c.view());
            Ok(Some(target_loss(tkind, out.view(), y_val.view()).0.as_f64()))
        },
    )?;
    Ok((state.0, state.1))
}

/// `g` and `f` trained together on `sum L_t(f(g(x)), y) + lambda L_c(g(x), c)`.
pub fn train_joint<T: Scalar>(
    dataset: &ConceptDataset<T>,
    split: &DataSplit,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<BottleneckModel<T>> {
    cfg.validate()?;
    let g = ConceptPredictor::new(
        dataset.input_dim(),
        &cfg.g_hidden,
        cfg.activation,
        &dataset.schema,
        0,
        &mut stream_rng(cfg.seed, STREAM_G_INIT),
    )?;
    let mut log = TrainingLog::default();
    let (g, f) = fit_joint(g, dataset, split, lambda, cfg, None, "joint", &mut log)?;
    Ok(BottleneckModel::assemble(g, f, dataset, TrainingMode::Joint, Some(lambda), log))
}
