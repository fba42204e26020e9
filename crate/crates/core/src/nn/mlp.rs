// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
            Activation::Softplus => {
                if z > T::of(30.0) {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative at pre-activation `z`, given `a = apply(z)`.
    #[inline]
    pub fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => T::one() - a * a,
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => a * (T::one() - a),
            Activation::Softplus => T::one() / (T::one() + (-z).exp()),
        }
    }
}

/// One layer of an [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum Layer<T> {
    /// `a = act(x W + b)` with `W` stored `in x out`.
    Dense {
        weights: Array2<T>,
        bias: Array1<T>,
        activation: Activation,
    },
    /// Input is `blocks` contiguous blocks of width `beta.len()`; output unit
    /// `i` is `beta . block_i + bias`, with `(beta, bias)` shared by all blocks.
    BlockProjection {
        beta: Array1<T>,
        bias: Array1<T>,
        blocks: usize,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Dense { weights, .. } => weights.nrows(),
            Layer::BlockProjection { beta, blocks, .. } => beta.len() * blocks,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Dense { weights, .. } => weights.ncols(),
            Layer::BlockProjection { blocks, .. } => *blocks,
        }
    }

    fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        match self {
            Layer::Dense {
                weights,
                bias,
                activation,
            } => {
                let mut z = x.dot(weights);
                z += bias;
                let a = if *activation == Activation::Identity {
                    z.clone()
                } else {
                    z.mapv(|v| activation.apply(v))
                };
                (z, a)
            }
            Layer::BlockProjection { beta, bias, blocks } => {
                let m = beta.len();
                let mut out = Array2::from_elem((x.nrows(), *blocks), bias[0]);
                for (xr, mut or) in x.outer_iter().zip(out.outer_iter_mut()) {
                    for i in 0..*blocks {
                        let mut s = T::zero();
                        for k in 0..m {
                            s += beta[k] * xr[i * m + k];
                        }
                        or[i] += s;
                    }
                }
                (out.clone(), out)
            }
        }
    }

    fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Dense { weights, bias, .. } => vec![
                weights.as_slice().expect("standard layout"),
                bias.as_slice().expect("standard layout"),
            ],
            Layer::BlockProjection { beta, bias, .. } => vec![
                beta.as_slice().expect("standard layout"),
                bias.as_slice().expect("standard layout"),
            ],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Dense { weights, bias, .. } => vec![
                weights.as_slice_mut().expect("standard layout"),
                bias.as_slice_mut().expect("standard layout"),
            ],
            Layer::BlockProjection { beta, bias, .. } => vec![
                beta.as_slice_mut().expect("standard layout"),
                bias.as_slice_mut().expect("standard layout"),
            ],
        }
    }
}

/// Layer widths and activations used to build an [`Mlp`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub hidden_activation: Activation,
    /// When set, the output layer is a shared projection over blocks of this
    /// width: the last hidden layer gets `block_width * output_dim` units.
    #[serde(default)]
    pub block_width: Option<usize>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            hidden_activation: Activation::Tanh,
            block_width: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(CbmError::config("architecture", "layer widths must be positive"));
        }
        if self.block_width == Some(0) {
            return Err(CbmError::config("block_width", "must be >= 1"));
        }
        Ok(())
    }
}

/// Multi-layer perceptron with hand-written reverse-mode gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T> {
    pub layers: Vec<Layer<T>>,
}

/// Activations recorded by [`Mlp::forward_cached`].
pub struct ForwardCache<T> {
    /// `inputs[l]` is the input to layer `l`.
    pub inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    pub output: Array2<T>,
}

/// Parameter gradients in the order of [`Mlp::params`].
pub type ParamGrads<T> = Vec<Vec<T>>;

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden);
        let mut layers = Vec::new();
        let dense = |fan_in: usize, fan_out: usize, act: Activation, rng: &mut R| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
            Layer::Dense {
                weights: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    T::of(dist.sample(rng))
                }),
                bias: Array1::zeros(fan_out),
                activation: act,
            }
        };
        for w in widths.windows(2) {
            layers.push(dense(w[0], w[1], spec.hidden_activation, rng));
        }
        let last = *widths.last().unwrap();
        match spec.block_width {
            None => layers.push(dense(last, spec.output_dim, Activation::Identity, rng)),
            Some(m) => {
                layers.push(dense(last, m * spec.output_dim, spec.hidden_activation, rng));
                let limit = (3.0 / m as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
                layers.push(Layer::BlockProjection {
                    beta: Array1::from_shape_simple_fn(m, || T::of(dist.sample(rng))),
                    bias: Array1::zeros(1),
                    blocks: spec.output_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    /// Single affine layer `x W + b`.
    pub fn linear(weights: Array2<T>, bias: Array1<T>) -> Self {
        Self {
            layers: vec![Layer::Dense {
                weights,
                bias,
                activation: Activation::Identity,
            }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut cur: Option<Array2<T>> = None;
        for layer in &self.layers {
            let (_, a) = match &cur {
                None => layer.forward(x),
                Some(c) => layer.forward(c.view()),
            };
            cur = Some(a);
        }
        cur.expect("at least one layer")
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> ForwardCache<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let (z, a) = layer.forward(cur.view());
            inputs.push(cur);
            pre.push(z);
            cur = a;
        }
        ForwardCache {
            inputs,
            pre,
            output: cur,
        }
    }

    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: ArrayView2<T>) -> (ParamGrads<T>, Array2<T>) {
        self.backward_with_injection(cache, grad_out, &[])
    }

    /// Reverse pass. `injections` add extra gradient w.r.t. the input of the
    /// given layer index (i.e. the output of the previous layer). Returns
    /// parameter gradients and the gradient w.r.t. the network input.
    pub fn backward_with_injection(
        &self,
        cache: &ForwardCache<T>,
        grad_out: ArrayView2<T>,
        injections: &[(usize, ArrayView2<T>)],
    ) -> (ParamGrads<T>, Array2<T>) {
        let mut grads: Vec<Vec<Vec<T>>> = vec![Vec::new(); self.layers.len()];
        let mut da = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let x = &cache.inputs[l];
            let z = &cache.pre[l];
            match &self.layers[l] {
                Layer::Dense {
                    weights,
                    activation,
                    ..
                } => {
                    let dz = if *activation == Activation::Identity {
                        da
                    } else {
                        let a_out = if l + 1 < self.layers.len() {
                            &cache.inputs[l + 1]
                        } else {
                            &cache.output
                        };
                        let mut dz = da;
                        ndarray::Zip::from(&mut dz)
                            .and(z)
                            .and(a_out)
                            .for_each(|d, &zv, &av| *d *= activation.derivative(zv, av));
                        dz
                    };
                    let dw = x.t().dot(&dz);
                    let db = dz.sum_axis(Axis(0));
                    da = dz.dot(&weights.t());
                    grads[l] = vec![dw.iter().copied().collect(), db.to_vec()];
                }
                Layer::BlockProjection { beta, blocks, .. } => {
                    let m = beta.len();
                    let mut dbeta = vec![T::zero(); m];
                    let mut dbias = T::zero();
                    let mut dx = Array2::zeros(x.raw_dim());
                    for ((xr, dr), mut dxr) in x.outer_iter().zip(da.outer_iter()).zip(dx.outer_iter_mut()) {
                        for i in 0..*blocks {
                            let g = dr[i];
                            dbias += g;
                            for k in 0..m {
                                dbeta[k] += g * xr[i * m + k];
                                dxr[i * m + k] = g * beta[k];
                            }
                        }
                    }
                    da = dx;
                    grads[l] = vec![dbeta, vec![dbias]];
                }
            }
            for (idx, inj) in injections {
                if *idx == l {
                    da += inj;
                }
            }
        }
        (grads.into_iter().flatten().collect(), da)
    }

    /// Gradient of the scalar `sum_n sum_j weights[n, j] * out[n, j]` w.r.t.
    /// the inputs; with a one-hot row of weights this is the input gradient of
    /// one output unit.
    pub fn input_gradient(&self, x: ArrayView2<T>, output_index: usize) -> Array2<T> {
        let cache = self.forward_cached(x);
        let mut g = Array2::zeros(cache.output.raw_dim());
        g.column_mut(output_index).fill(T::one());
        self.backward(&cache, g.view()).1
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params().into_iter().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
    }

    /// Final layer, if dense: `(weights in x out, bias)`.
    pub fn last_dense(&self) -> Option<(&Array2<T>, &Array1<T>)> {
        match self.layers.last()? {
            Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            Layer::BlockProjection { .. } => None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `sum(weights * forward(x))` w.r.t. every parameter.
    fn fd_param_grads(net: &Mlp<f64>, x: &Array2<f64>, w: &Array2<f64>) -> Vec<f64> {
        let base = net.flat_params();
        let h = 1e-6;
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += h;
                let mut a = net.clone();
                a.set_flat_params(&p);
                p[i] -= 2.0 * h;
                let mut b = net.clone();
                b.set_flat_params(&p);
                ((&a.forward(x.view()) * w).sum() - (&b.forward(x.view()) * w).sum()) / (2.0 * h)
            })
            .collect()
    }

    fn check(spec: MlpSpec, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::<f64>::new(&spec, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, spec.input_dim), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((5, spec.output_dim), |_| rng.random_range(-1.0..1.0));
        let cache = net.forward_cached(x.view());
        let (g, dx) = net.backward(&cache, w.view());
        let analytic: Vec<f64> = g.into_iter().flatten().collect();
        let numeric = fd_param_grads(&net, &x, &w);
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-3);
            assert!((a - n).abs() / denom < 1e-4, "param grad {a} vs {n}");
        }
        let h = 1e-6;
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let n = ((&net.forward(xp.view()) * &w).sum() - (&net.forward(xm.view()) * &w).sum())
                    / (2.0 * h);
                let a = dx[[r, c]];
                assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-3) < 1e-4);
            }
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus] {
            let mut spec = MlpSpec::new(4, &[8, 6], 3);
            spec.hidden_activation = act;
            check(spec, 3);
        }
    }

    #[test]
    fn block_projection_gradients_match_finite_differences() {
        let mut spec = MlpSpec::new(5, &[7], 3);
        spec.block_width = Some(4);
        check(spec, 11);
    }

    #[test]
    fn injection_adds_gradient_at_hidden_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::new(&MlpSpec::new(3, &[4], 2), &mut rng).unwrap();
        let x = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 0.3);
        let cache = net.forward_cached(x.view());
        let zero = Array2::zeros((2, 2));
        let inj = Array2::from_elem((2, 4), 1.0);
        let (g, _) = net.backward_with_injection(&cache, zero.view(), &[(1, inj.view())]);
        // dL/dh = 1 for every hidden unit → first-layer weight grads nonzero, output grads zero
        assert!(g[0].iter().any(|v| v.abs() > 0.0));
        assert!(g[2].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_independent_of_memory_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f64>::new(&MlpSpec::new(3, &[5], 4), &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let w_f = w.t().as_standard_layout().into_owned().reversed_axes();
        assert!(!w_f.is_standard_layout());
        let cache = net.forward_cached(x.view());
        assert_eq!(net.backward(&cache, w.view()), net.backward(&cache, w_f.view()));
    }

    #[test]
    fn f32_forward_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::<f32>::new(&MlpSpec::new(2, &[3], 1), &mut rng).unwrap();
        let y = net.forward(Array2::<f32>::zeros((4, 2)).view());
        assert_eq!(y.dim(), (4, 1));
    }
}
