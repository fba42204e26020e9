// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neural mutual-information estimation through the Donsker-Varadhan bound
//! `I(A; B) >= E_P[T] - log E_{P_A x P_B}[exp T]`, with `T` a small MLP on
//! the concatenated pair. Product-of-marginals samples pair each `a` with a
//! `b` from a within-batch permutation.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, MlpSpec};
use crate::scalar::log_sum_exp;

/// Minimum number of paired samples accepted by [`mine_mi_estimate`].
pub const MINE_MIN_SAMPLES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatisticsNetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Optimiser steps per call to [`MineEstimator::train`] (one outer epoch).
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Permutations averaged for the final full-data estimate.
    pub eval_permutations: usize,
    pub seed: u64,
}

impl Default for StatisticsNetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            steps: 1500,
            learning_rate: 1e-3,
            batch_size: 512,
            eval_permutations: 8,
            seed: 0,
        }
    }
}

impl StatisticsNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CbmError::config("statistics_net.steps", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CbmError::config("statistics_net.learning_rate", "must be > 0"));
        }
        if self.batch_size < 2 {
            return Err(CbmError::config("statistics_net.batch_size", "must be >= 2"));
        }
        if self.eval_permutations == 0 {
            return Err(CbmError::config("statistics_net.eval_permutations", "must be >= 1"));
        }
        Ok(())
    }
}

/// Column standardisation fitted once per training call and held fixed.
#[derive(Clone, Debug)]
struct Standardizer {
    mean: Array1<f64>,
    inv_std: Array1<f64>,
}

impl Standardizer {
    fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
        let inv_std = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        Self { mean, inv_std }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) * &self.inv_std
    }
}

/// A statistics network with its optimiser state, kept across outer epochs.
#[derive(Clone, Debug)]
pub struct MineEstimator {
    cfg: StatisticsNetConfig,
    net: Mlp<f64>,
    opt: Adam<f64>,
    rng: ChaCha8Rng,
    dim_a: usize,
    scale: Option<Standardizer>,
}

pub struct MineObjective {
    pub value: f64,
    pub d_a: Array2<f64>,
    pub d_b: Array2<f64>,
}

impl MineEstimator {
    pub fn new(dim_a: usize, dim_b: usize, cfg: &StatisticsNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut spec = MlpSpec::new(dim_a + dim_b, &cfg.hidden, 1);
        spec.hidden_activation = cfg.activation;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Mlp::new(&spec, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            net,
            opt: Adam::new(AdamConfig::new(cfg.learning_rate)),
            rng,
            dim_a,
            scale: None,
        })
    }

    fn pair(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
        let ab = concatenate(Axis(1), &[a, b]).expect("equal row counts");
        match &self.scale {
            Some(s) => s.apply(ab.view()),
            None => ab,
        }
    }

    /// DV objective on rows `(a_i, b_i)` against `(a_i, b_perm[i])`, with
    /// gradients w.r.t. `a` and `b` when `want_input_grad`.
    fn objective_inner(
        &self,
        a: ArrayView2<f64>,
        b: ArrayView2<f64>,
        perm: &[usize],
        want_input_grad: bool,
    ) -> (f64, Option<(Array2<f64>, Array2<f64>)>, Option<Vec<Vec<f64>>>) {
        let n = a.nrows();
        let b_perm = b.select(Axis(0), perm);
        let xj = self.pair(a, b);
        let xm = self.pair(a, b_perm.view());
        let cj = self.net.forward_cached(xj.view());
        let cm = self.net.forward_cached(xm.view());
        let tj = cj.output.column(0);
        let tm = cm.output.column(0);
        let lse = log_sum_exp(tm.iter().copied());
        let value = tj.sum() / n as f64 - (lse - (n as f64).ln());
        // d value / d T: 1/n on joint rows, -softmax on marginal rows.
        let gj = Array2::from_elem((n, 1), 1.0 / n as f64);
        let gm = tm.mapv(|t| -(t - lse).exp()).insert_axis(Axis(1));
        let (pj, dxj) = self.net.backward(&cj, gj.view());
        let (pm, dxm) = self.net.backward(&cm, gm.view());
        let pgrads: Vec<Vec<f64>> = pj
            .into_iter()
            .zip(pm)
            .map(|(x, y)| x.into_iter().zip(y).map(|(p, q)| p + q).collect())
            .collect();
        let input = want_input_grad.then(|| {
            let (mut dxj, mut dxm) = (dxj, dxm);
            if let Some(s) = &self.scale {
                dxj *= &s.inv_std;
                dxm *= &s.inv_std;
            }
            let da = &dxj.slice(s![.., ..self.dim_a]) + &dxm.slice(s![.., ..self.dim_a]);
            let mut db = dxj.slice(s![.., self.dim_a..]).to_owned();
            // Row i of the marginal batch read b[perm[i]].
            for (i, &p) in perm.iter().enumerate() {
                let row = dxm.slice(s![i, self.dim_a..]).to_owned();
                let mut dst = db.row_mut(p);
                dst += &row;
            }
            (da, db)
        });
        (value, input, Some(pgrads))
    }

    /// Ascend the DV bound for the configured number of steps on minibatches
    /// of `(a, b)`. Returns the last minibatch objective.
    pub fn train(&mut self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
        let n = a.nrows();
        if n != b.nrows() {
            return Err(CbmError::DimensionMismatch {
                expected: n,
                actual: b.nrows(),
                context: "MINE sample pairing".into(),
            });
        }
        if n < 2 {
            return Err(CbmError::Invalid("MINE needs at least two samples".into()));
        }
        self.scale = Some(Standardizer::fit(
            concatenate(Axis(1), &[a, b]).expect("equal rows").view(),
        ));
        let bs = self.cfg.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut last = 0.0;
        for step in 0..self.cfg.steps {
            if cursor + bs > n {
                order.shuffle(&mut self.rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let ab = a.select(Axis(0), idx);
            let bb = b.select(Axis(0), idx);
            let mut perm: Vec<usize> = (0..bs).collect();
            perm.shuffle(&mut self.rng);
            let (value, _, grads) = self.objective_inner(ab.view(), bb.view(), &perm, false);
            if !value.is_finite() {
                return Err(CbmError::Divergence {
                    epoch: step,
                    message: "MINE objective is not finite".into(),
                });
            }
            let neg: Vec<Vec<f64>> = grads
                .expect("parameter gradients")
                .into_iter()
                .map(|v| v.into_iter().map(|x| -x).collect())
                .collect();
            self.opt.step(self.net.params_mut(), &neg);
            last = value;
        }
        Ok(last)
    }

    /// Full-data objective averaged over several random permutations.
    pub fn estimate(&mut self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
        let n = a.nrows();
        let mut total = 0.0;
        for _ in 0..self.cfg.eval_permutations {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut self.rng);
            total += self.objective_inner(a, b, &perm, false).0;
        }
        total / self.cfg.eval_permutations as f64
    }

    /// Objective on one batch with a fresh permutation, plus its gradient
    /// w.r.t. both blocks; the network is held fixed.
    pub fn objective_with_input_grad(&mut self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> MineObjective {
        let mut perm: Vec<usize> = (0..a.nrows()).collect();
        perm.shuffle(&mut self.rng);
        let (value, g, _) = self.objective_inner(a, b, &perm, true);
        let (d_a, d_b) = g.expect("input gradients");
        MineObjective { value, d_a, d_b }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineEstimate {
    /// Nats.
    pub estimate: f64,
    pub final_batch_objective: f64,
}

/// Train a fresh statistics network on `(a, b)` and return the full-data bound.
pub fn mine_mi_estimate(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &StatisticsNetConfig) -> Result<MineEstimate> {
    if a.nrows() < MINE_MIN_SAMPLES {
        return Err(CbmError::Invalid(format!(
            "MINE needs at least {MINE_MIN_SAMPLES} paired samples, got {}",
            a.nrows()
        )));
    }
    let mut est = MineEstimator::new(a.ncols(), b.ncols(), cfg)?;
    let final_batch_objective = est.train(a, b)?;
    let estimate = est.estimate(a, b);
    if !estimate.is_finite() {
        return Err(CbmError::Divergence {
            epoch: cfg.steps,
            message: "MINE estimate is not finite".into(),
        });
    }
    Ok(MineEstimate {
        estimate,
        final_batch_objective,
    })
}
