// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient, Integrated Gradients and SmoothGrad saliency, from the concept
//! layer to inputs and from targets to the concept layer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};
use crate::models::{BottleneckModel, ConceptPredictor, TargetPredictor};
use crate::nn::Mlp;
use crate::scalar::{softmax, Scalar};

/// A vector-valued map whose outputs can be attributed one at a time.
pub trait Differentiable<T: Scalar> {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Output `index` at every row of `x`.
    fn eval(&self, x: ArrayView2<T>, index: usize) -> Result<Array1<T>>;
    /// Gradient of output `index` w.r.t. each row of `x`.
    fn grad(&self, x: ArrayView2<T>, index: usize) -> Result<Array2<T>>;
}

impl<T: Scalar> Differentiable<T> for Mlp<T> {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }
    fn eval(&self, x: ArrayView2<T>, index: usize) -> Result<Array1<T>> {
        Ok(self.forward(x).column(index).to_owned())
    }
    fn grad(&self, x: ArrayView2<T>, index: usize) -> Result<Array2<T>> {
        Ok(self.input_gradient(x, index))
    }
}

/// Concept-layer values (after per-group softmax) as functions of the input.
impl<T: Scalar> Differentiable<T> for ConceptPredictor<T> {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        ConceptPredictor::output_dim(self)
    }
    fn eval(&self, x: ArrayView2<T>, index: usize) -> Result<Array1<T>> {
        Ok(self.forward(x)?.column(index).to_owned())
    }
    fn grad(&self, x: ArrayView2<T>, index: usize) -> Result<Array2<T>> {
        self.input_gradient(x, index)
    }
}

impl<T: Scalar> Differentiable<T> for TargetPredictor<T> {
    fn input_dim(&self) -> usize {
        TargetPredictor::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        TargetPredictor::output_dim(self)
    }
    fn eval(&self, x: ArrayView2<T>, index: usize) -> Result<Array1<T>> {
        Ok(self.forward(x)?.column(index).to_owned())
    }
    fn grad(&self, x: ArrayView2<T>, index: usize) -> Result<Array2<T>> {
        self.forward(x)?;
        Ok(self.net.input_gradient(x, index))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradient,
    #[default]
    IntegratedGradients,
    SmoothGrad,
}

/// Method averaged by SmoothGrad.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    #[default]
    Gradient,
    IntegratedGradients,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    #[default]
    Zeros,
    /// One fixed-seed draw from `N(0, noise_std^2 I)`, shared by all inputs.
    GaussianNoise,
    DatasetMean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub noise_std: Option<f64>,
    pub seed: u64,
}

impl BaselineSpec {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BaselineKind::GaussianNoise && !self.noise_std.is_some_and(|s| s > 0.0 && s.is_finite()) {
            return Err(CbmError::config("baseline.noise_std", "gaussian baseline needs noise_std > 0"));
        }
        Ok(())
    }

    /// The baseline point; `reference` rows supply the dataset mean.
    pub fn resolve<T: Scalar>(&self, dim: usize, reference: Option<ArrayView2<T>>) -> Result<Array1<T>> {
        self.validate()?;
        match self.kind {
            BaselineKind::Zeros => Ok(Array1::zeros(dim)),
            BaselineKind::GaussianNoise => {
                let std = self.noise_std.expect("validated");
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok(Array1::from_shape_simple_fn(dim, || {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    T::of(std * e)
                }))
            }
            BaselineKind::DatasetMean => {
                let r = reference.ok_or_else(|| CbmError::Invalid("dataset_mean baseline needs reference rows".into()))?;
                if r.ncols() != dim {
                    return Err(CbmError::DimensionMismatch {
                        expected: dim,
                        actual: r.ncols(),
                        context: "baseline reference".into(),
                    });
                }
                r.mean_axis(Axis(0))
                    .ok_or_else(|| CbmError::Invalid("dataset_mean baseline needs reference rows".into()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionParams {
    pub method: Method,
    pub steps: usize,
    pub baseline: BaselineSpec,
    pub smooth_inner: InnerMethod,
    /// `None` means 0.1 times the value range of the reference inputs.
    pub noise_std: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// Relative completeness residual above which an IG map is flagged.
    pub completeness_tolerance: f64,
}

impl Default for AttributionParams {
    fn default() -> Self {
        Self {
            method: Method::IntegratedGradients,
            steps: 64,
            baseline: BaselineSpec::zeros(),
            smooth_inner: InnerMethod::Gradient,
            noise_std: None,
            n_samples: 25,
            seed: 0,
            completeness_tolerance: 1e-3,
        }
    }
}

impl AttributionParams {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let uses_ig = self.method == Method::IntegratedGradients
            || (self.method == Method::SmoothGrad && self.smooth_inner == InnerMethod::IntegratedGradients);
        if uses_ig && self.steps < 8 {
            return Err(CbmError::config("attribution.steps", "integrated gradients needs steps >= 8"));
        }
        if self.method == Method::SmoothGrad {
            if self.n_samples == 0 {
                return Err(CbmError::config("attribution.n_samples", "must be >= 1"));
            }
            if let Some(s) = self.noise_std {
                if !(s >= 0.0) || !s.is_finite() {
                    return Err(CbmError::config("attribution.noise_std", "must be finite and >= 0"));
                }
            }
        }
        self.baseline.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Array1<f64>,
    pub method: Method,
    pub inner: Option<InnerMethod>,
    pub baseline: Option<BaselineSpec>,
    pub output_index: usize,
    pub steps: Option<usize>,
    pub noise_std: Option<f64>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    /// `|sum(values) - (F(x) - F(b))|`, IG only.
    pub completeness_residual: Option<f64>,
    /// Residual relative to `|F(x) - F(b)|` exceeded the tolerance.
    pub completeness_flagged: bool,
}

impl SaliencyMap {
    fn plain(values: Array1<f64>, method: Method, output_index: usize) -> Self {
        Self {
            values,
            method,
            inner: None,
            baseline: None,
            output_index,
            steps: None,
            noise_std: None,
            n_samples: None,
            seed: None,
            completeness_residual: None,
            completeness_flagged: false,
        }
    }

    /// Fraction of L1 mass on the listed coordinates; 0 for an all-zero map.
    pub fn mass_fraction(&self, coords: &[usize]) -> f64 {
        let total: f64 = self.values.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            return 0.0;
        }
        coords.iter().map(|&c| self.values[c].abs()).sum::<f64>() / total
    }
}

fn check_point<T: Scalar, F: Differentiable<T> + ?Sized>(f: &F, x: ArrayView1<T>, index: usize) -> Result<()> {
    if x.len() != f.input_dim() {
        return Err(CbmError::DimensionMismatch {
            expected: f.input_dim(),
            actual: x.len(),
            context: "attributed input".into(),
        });
    }
    if index >= f.output_dim() {
        return Err(CbmError::Invalid(format!("output index {index} >= {}", f.output_dim())));
    }
    Ok(())
}

fn finite_values<T: Scalar>(v: ArrayView1<T>, context: &str) -> Result<Array1<f64>> {
    let out = v.mapv(|x| x.as_f64());
    if let Some(i) = out.iter().position(|x| !x.is_finite()) {
        return Err(CbmError::NonFinite {
            index: i,
            context: context.to_string(),
        });
    }
    Ok(out)
}

/// `d F_index / d x` at `x`.
pub fn gradient_saliency<T: Scalar, F: Differentiable<T> + ?Sized>(f: &F, x: ArrayView1<T>, index: usize) -> Result<SaliencyMap> {
    check_point(f, x, index)?;
    let g = f.grad(x.insert_axis(Axis(0)), index)?;
    let values = finite_values(g.row(0), "gradient saliency")?;
    Ok(SaliencyMap::plain(values, Method::Gradient, index))
}

/// `(x - b) * mean_s grad F(b + a_s (x - b))` with midpoints `a_s = (s + 1/2) / steps`.
pub fn integrated_gradients<T: Scalar, F: Differentiable<T> + ?Sized>(
    f: &F,
    x: ArrayView1<T>,
    baseline: ArrayView1<T>,
    steps: usize,
    index: usize,
    tolerance: f64,
) -> Result<SaliencyMap> {
    check_point(f, x, index)?;
    if baseline.len() != x.len() {
        return Err(CbmError::DimensionMismatch {
            expected: x.len(),
            actual: baseline.len(),
            context: "IG baseline".into(),
        });
    }
    if steps == 0 {
        return Err(CbmError::config("steps", "must be >= 1"));
    }
    let diff = &x - &baseline;
    let path = Array2::from_shape_fn((steps, x.len()), |(s, j)| {
        let a = T::of((s as f64 + 0.5) / steps as f64);
        baseline[j] + a * diff[j]
    });
    let grads = f.grad(path.view(), index)?;
    let avg = grads.sum_axis(Axis(0)) / T::of(steps as f64);
    let values = finite_values((&avg * &diff).view(), "integrated gradients")?;
    let ends = ndarray::stack(Axis(0), &[x, baseline]).expect("equal lengths");
    let fv = f.eval(ends.view(), index)?;
    let delta = fv[0].as_f64() - fv[1].as_f64();
    let residual = (values.sum() - delta).abs();
    let mut map = SaliencyMap::plain(values, Method::IntegratedGradients, index);
    map.steps = Some(steps);
    map.completeness_residual = Some(residual);
    map.completeness_flagged = residual > tolerance * delta.abs().max(f64::MIN_POSITIVE);
    Ok(map)
}

/// Mean of `inner` maps at `x + eps`, `eps ~ N(0, noise_std^2 I)`. Zero
/// noise returns the inner map at `x` unchanged.
#[allow(clippy::too_many_arguments)]
pub fn smoothgrad<T: Scalar, F: Differentiable<T> + ?Sized>(
    inner: InnerMethod,
    f: &F,
    x: ArrayView1<T>,
    baseline: ArrayView1<T>,
    steps: usize,
    noise_std: f64,
    n_samples: usize,
    seed: u64,
    index: usize,
) -> Result<SaliencyMap> {
    if n_samples == 0 {
        return Err(CbmError::config("n_samples", "must be >= 1"));
    }
    if !(noise_std >= 0.0) {
        return Err(CbmError::config("noise_std", "must be >= 0"));
    }
    let run = |p: ArrayView1<T>| match inner {
        InnerMethod::Gradient => gradient_saliency(f, p, index),
        InnerMethod::IntegratedGradients => integrated_gradients(f, p, baseline, steps, index, f64::INFINITY),
    };
    let values = if noise_std == 0.0 {
        run(x)?.values
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = Array1::<f64>::zeros(x.len());
        for _ in 0..n_samples {
            let p = x.mapv(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + T::of(noise_std * e)
            });
            acc += &run(p.view())?.values;
        }
        acc / n_samples as f64
    };
    let mut map = SaliencyMap::plain(values, Method::SmoothGrad, index);
    map.inner = Some(inner);
    map.noise_std = Some(noise_std);
    map.n_samples = Some(n_samples);
    map.seed = Some(seed);
    if inner == InnerMethod::IntegratedGradients {
        map.steps = Some(steps);
    }
    Ok(map)
}

/// Attribution parameters with the baseline and noise scale resolved against
/// reference inputs, applied uniformly to many points.
#[derive(Clone, Debug)]
pub struct Attributor<T> {
    pub params: AttributionParams,
    pub baseline: Array1<T>,
    pub noise_std: f64,
}

impl<T: Scalar> Attributor<T> {
    pub fn new(params: &AttributionParams, dim: usize, reference: Option<ArrayView2<T>>) -> Result<Self> {
        params.validate()?;
        let baseline = params.baseline.resolve(dim, reference)?;
        let noise_std = match params.noise_std {
            Some(s) => s,
            None => match reference {
                Some(r) if r.len() > 0 => {
                    let lo = r.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
                    let hi = r.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                    0.1 * (hi - lo)
                }
                _ => 0.0,
            },
        };
        Ok(Self {
            params: params.clone(),
            baseline,
            noise_std,
        })
    }

    pub fn attribute<F: Differentiable<T> + ?Sized>(&self, f: &F, x: ArrayView1<T>, index: usize) -> Result<SaliencyMap> {
        if self.baseline.len() != x.len() {
            return Err(CbmError::DimensionMismatch {
                expected: self.baseline.len(),
                actual: x.len(),
                context: "attributor baseline".into(),
            });
        }
        let p = &self.params;
        let mut map = match p.method {
            Method::Gradient => gradient_saliency(f, x, index)?,
            Method::IntegratedGradients => {
                integrated_gradients(f, x, self.baseline.view(), p.steps, index, p.completeness_tolerance)?
            }
            Method::SmoothGrad => smoothgrad(
                p.smooth_inner,
                f,
                x,
                self.baseline.view(),
                p.steps,
                self.noise_std,
                p.n_samples,
                p.seed,
                index,
            )?,
        };
        if p.method == Method::IntegratedGradients
            || (p.method == Method::SmoothGrad && p.smooth_inner == InnerMethod::IntegratedGradients)
        {
            map.baseline = Some(p.baseline);
        }
        Ok(map)
    }
}

/// One map per concept-layer unit in `group`'s slice.
pub fn concept_to_input_saliency<T: Scalar>(
    model: &BottleneckModel<T>,
    x: ArrayView1<T>,
    group: usize,
    attributor: &Attributor<T>,
) -> Result<Vec<SaliencyMap>> {
    if group >= model.schema.k_groups() {
        return Err(CbmError::Invalid(format!(
            "group {group} out of range (k = {})",
            model.schema.k_groups()
        )));
    }
    model
        .schema
        .slice(group)
        .map(|u| attributor.attribute(&model.g, x, u))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Weighted by the softmax of the group's logits.
    SoftmaxWeighted,
}

/// Combine per-category maps of one group into a single map.
pub fn aggregate_group_saliency(maps: &[SaliencyMap], logits: Option<&[f64]>, mode: Aggregation) -> Result<SaliencyMap> {
    let first = maps.first().ok_or_else(|| CbmError::Invalid("no maps to aggregate".into()))?;
    let len = first.values.len();
    if let Some(m) = maps.iter().find(|m| m.values.len() != len) {
        return Err(CbmError::DimensionMismatch {
            expected: len,
            actual: m.values.len(),
            context: "aggregated map length".into(),
        });
    }
    let weights = match mode {
        Aggregation::Mean => vec![1.0 / maps.len() as f64; maps.len()],
        Aggregation::SoftmaxWeighted => {
            let l = logits.ok_or_else(|| CbmError::Invalid("softmax aggregation needs logits".into()))?;
            if l.len() != maps.len() {
                return Err(CbmError::DimensionMismatch {
                    expected: maps.len(),
                    actual: l.len(),
                    context: "aggregation logits".into(),
                });
            }
            softmax(l)
        }
    };
    let mut values = Array1::<f64>::zeros(len);
    for (m, w) in maps.iter().zip(&weights) {
        values.scaled_add(*w, &m.values);
    }
    let mut out = first.clone();
    out.values = values;
    out.completeness_residual = None;
    out.completeness_flagged = false;
    Ok(out)
}

/// Attribution of `f`'s output `target_index` over concept-layer values `c`.
pub fn target_to_concept_importance<T: Scalar>(
    model: &BottleneckModel<T>,
    c: ArrayView1<T>,
    target_index: usize,
    attributor: &Attributor<T>,
) -> Result<SaliencyMap> {
    attributor.attribute(&model.f, c, target_index)
}
