// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptSchema, TaskKind, UnitKind};
use crate::error::{CbmError, Result};
use crate::nn::{ForwardCache, Mlp, MlpSpec, ParamGrads};
use crate::scalar::{softmax_in_place, Scalar};

/// One sub-network of a concept predictor: reads `inputs` (all coordinates
/// when `None`) and writes bottleneck units `out_start..out_start + net.output_dim()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Branch<T> {
    pub inputs: Option<Vec<usize>>,
    pub out_start: usize,
    pub net: Mlp<T>,
}

impl<T: Scalar> Branch<T> {
    fn gather(&self, x: ArrayView2<T>) -> Array2<T> {
        match &self.inputs {
            None => x.to_owned(),
            Some(cols) => x.select(Axis(1), cols),
        }
    }
}

/// `g: R^d -> R^k`. Raw network outputs are mapped to the concept layer by
/// a per-group softmax on categorical slices; real units and any extra
/// (unsupervised) units are left as is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConceptPredictor<T> {
    pub input_dim: usize,
    pub schema: ConceptSchema,
    /// Units after the schema's `k_expanded` supervised ones.
    pub extra_units: usize,
    pub branches: Vec<Branch<T>>,
}

pub struct ConceptCache<T> {
    pub branches: Vec<ForwardCache<T>>,
    pub raw: Array2<T>,
    pub activated: Array2<T>,
}

impl<T: Scalar> ConceptPredictor<T> {
    /// Single network over all inputs.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        activation: crate::nn::Activation,
        schema: &ConceptSchema,
        extra_units: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut spec = MlpSpec::new(input_dim, hidden, schema.k_expanded() + extra_units);
        spec.hidden_activation = activation;
        Ok(Self {
            input_dim,
            schema: schema.clone(),
            extra_units,
            branches: vec![Branch {
                inputs: None,
                out_start: 0,
                net: Mlp::new(&spec, rng)?,
            }],
        })
    }

    /// Explicit branches; they must tile `0..k_expanded + extra_units` in order.
    pub fn from_branches(
        input_dim: usize,
        schema: &ConceptSchema,
        extra_units: usize,
        branches: Vec<Branch<T>>,
    ) -> Result<Self> {
        let mut next = 0;
        for (i, b) in branches.iter().enumerate() {
            if b.out_start != next {
                return Err(CbmError::config("branches", format!("branch {i} starts at {} not {next}", b.out_start)));
            }
            let want_in = b.inputs.as_ref().map_or(input_dim, |c| c.len());
            if b.net.input_dim() != want_in {
                return Err(CbmError::DimensionMismatch {
                    expected: want_in,
                    actual: b.net.input_dim(),
                    context: format!("branch {i} input width"),
                });
            }
            if let Some(cols) = &b.inputs {
                if let Some(&c) = cols.iter().find(|&&c| c >= input_dim) {
                    return Err(CbmError::config("branches", format!("input column {c} >= {input_dim}")));
                }
            }
            next += b.net.output_dim();
        }
        if next != schema.k_expanded() + extra_units {
            return Err(CbmError::config(
                "branches",
                format!("branches produce {next} units, need {}", schema.k_expanded() + extra_units),
            ));
        }
        Ok(Self {
            input_dim,
            schema: schema.clone(),
            extra_units,
            branches,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.schema.k_expanded() + self.extra_units
    }

    fn check_input(&self, x: ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(CbmError::DimensionMismatch {
                expected: self.input_dim,
                actual: x.ncols(),
                context: "concept predictor input".into(),
            });
        }
        Ok(())
    }

    pub fn forward_raw(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for b in &self.branches {
            let y = b.net.forward(b.gather(x).view());
            out.slice_mut(s![.., b.out_start..b.out_start + y.ncols()]).assign(&y);
        }
        Ok(out)
    }

    /// Concept-layer values.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.activate(self.forward_raw(x)?))
    }

    pub fn activate(&self, raw: Array2<T>) -> Array2<T> {
        let mut raw = if raw.is_standard_layout() { raw } else { raw.as_standard_layout().into_owned() };
        for g in 0..self.schema.k_groups() {
            if self.schema.unit_kind(g) == UnitKind::Categorical {
                let r = self.schema.slice(g);
                for mut row in raw.outer_iter_mut() {
                    let mut sl = row.slice_mut(s![r.clone()]);
                    softmax_in_place(sl.as_slice_mut().expect("contiguous row slice"));
                }
            }
        }
        raw
    }

    /// Map a gradient w.r.t. concept-layer values to one w.r.t. raw outputs.
    pub fn activation_backward(&self, activated: ArrayView2<T>, d_act: ArrayView2<T>) -> Array2<T> {
        let mut d_raw = d_act.to_owned();
        for g in 0..self.schema.k_groups() {
            if self.schema.unit_kind(g) == UnitKind::Categorical {
                let r = self.schema.slice(g);
                for (p, mut d) in activated.outer_iter().zip(d_raw.outer_iter_mut()) {
                    let p = p.slice(s![r.clone()]);
                    let mut d = d.slice_mut(s![r.clone()]);
                    let dot: T = p.iter().zip(d.iter()).map(|(a, b)| *a * *b).sum();
                    for (dv, &pv) in d.iter_mut().zip(p.iter()) {
                        *dv = pv * (*dv - dot);
                    }
                }
            }
        }
        d_raw
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> Result<ConceptCache<T>> {
        self.check_input(x)?;
        let mut raw = Array2::zeros((x.nrows(), self.output_dim()));
        let mut caches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let c = b.net.forward_cached(b.gather(x).view());
            raw.slice_mut(s![.., b.out_start..b.out_start + c.output.ncols()])
                .assign(&c.output);
            caches.push(c);
        }
        let activated = self.activate(raw.clone());
        Ok(ConceptCache {
            branches: caches,
            raw,
            activated,
        })
    }

    /// Backward pass from a gradient w.r.t. raw outputs. `injections[b]`
    /// holds per-branch hidden-layer gradient injections. Returns parameter
    /// gradients (in [`Self::params_mut`] order) and the input gradient.
    pub fn backward_raw(
        &self,
        cache: &ConceptCache<T>,
        d_raw: ArrayView2<T>,
        injections: &[Vec<(usize, Array2<T>)>],
    ) -> (ParamGrads<T>, Array2<T>) {
        let n = d_raw.nrows();
        let mut grads = Vec::new();
        let mut d_input = Array2::zeros((n, self.input_dim));
        for (bi, (b, c)) in self.branches.iter().zip(&cache.branches).enumerate() {
            let width = b.net.output_dim();
            let d_out = d_raw.slice(s![.., b.out_start..b.out_start + width]);
            let inj: Vec<(usize, ArrayView2<T>)> = injections
                .get(bi)
                .map(|v| v.iter().map(|(l, a)| (*l, a.view())).collect())
                .unwrap_or_default();
            let (g, dx) = b.net.backward_with_injection(c, d_out, &inj);
            grads.extend(g);
            match &b.inputs {
                None => d_input += &dx,
                Some(cols) => {
                    for (j, &col) in cols.iter().enumerate() {
                        let mut dst = d_input.column_mut(col);
                        dst += &dx.column(j);
                    }
                }
            }
        }
        (grads, d_input)
    }

    /// Input gradient of one concept-layer unit, per row.
    pub fn input_gradient(&self, x: ArrayView2<T>, unit: usize) -> Result<Array2<T>> {
        if unit >= self.output_dim() {
            return Err(CbmError::Invalid(format!("unit {unit} >= {}", self.output_dim())));
        }
        let cache = self.forward_cached(x)?;
        let mut d_act = Array2::zeros(cache.activated.raw_dim());
        d_act.column_mut(unit).fill(T::one());
        let d_raw = self.activation_backward(cache.activated.view(), d_act.view());
        Ok(self.backward_raw(&cache, d_raw.view(), &[]).1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.branches.iter_mut().flat_map(|b| b.net.params_mut()).collect()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.branches.iter().flat_map(|b| b.net.flat_params()).collect()
    }

    /// Number of parameter slices contributed by each branch.
    pub fn slices_per_branch(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.net.params().len()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.branches.iter().all(|b| b.net.all_finite())
    }
}

/// `f: R^k -> Y`: one regression output or one logit per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TargetPredictor<T> {
    pub task_kind: TaskKind,
    pub net: Mlp<T>,
}

impl<T: Scalar> TargetPredictor<T> {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        activation: crate::nn::Activation,
        task_kind: TaskKind,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut spec = MlpSpec::new(input_dim, hidden, outputs);
        spec.hidden_activation = activation;
        Ok(Self {
            task_kind,
            net: Mlp::new(&spec, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, c: ArrayView2<T>) -> Result<Array2<T>> {
        if c.ncols() != self.input_dim() {
            return Err(CbmError::DimensionMismatch {
                expected: self.input_dim(),
                actual: c.ncols(),
                context: "target predictor input".into(),
            });
        }
        Ok(self.net.forward(c))
    }
}
