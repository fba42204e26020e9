// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array2, ArrayView2};

use super::{
    mi::{pairwise_mi_histogram, soft_pairwise_mi, Binning, MiScope},
    mine::MineEstimator,
    vector_backward, vectors_from_cache, angular_diversification_loss, orthogonality_penalty,
    ExtendedBottleneckConfig, RegularizerKind,
};
use crate::data::{ConceptDataset, DataSplit};
use crate::error::Result;
use crate::models::{
    fit_joint, stream_rng, Branch, BottleneckModel, ConceptCache, ConceptPredictor, JointRegularizer,
    RegTerm, TrainConfig, TrainingLog, TrainingMode, STREAM_G_INIT,
};
use crate::nn::{Mlp, MlpSpec};
use crate::scalar::Scalar;

/// Concept predictor of width `h`, split into branches when inputs are masked.
pub fn build_extended_predictor<T: Scalar>(
    input_dim: usize,
    schema: &crate::data::ConceptSchema,
    ext: &ExtendedBottleneckConfig,
    cfg: &TrainConfig,
) -> Result<ConceptPredictor<T>> {
    ext.validate(Some(schema.k_expanded()), Some(input_dim))?;
    let mut rng = stream_rng(cfg.seed, STREAM_G_INIT);
    let spec = |inputs: usize, outputs: usize| {
        let mut s = MlpSpec::new(inputs, &cfg.g_hidden, outputs);
        s.hidden_activation = cfg.activation;
        s.block_width = ext.block_width;
        s
    };
    let mut branches = Vec::new();
    match &ext.masking {
        None => branches.push(Branch {
            inputs: None,
            out_start: 0,
            net: Mlp::new(&spec(input_dim, ext.h), &mut rng)?,
        }),
        Some(m) => {
            let width = m.specified_inputs.as_ref().map_or(input_dim, |c| c.len());
            branches.push(Branch {
                inputs: m.specified_inputs.clone(),
                out_start: 0,
                net: Mlp::new(&spec(width, ext.k), &mut rng)?,
            });
            let mut start = ext.k;
            for nb in &m.new_branches {
                branches.push(Branch {
                    inputs: Some(nb.inputs.clone()),
                    out_start: start,
                    net: Mlp::new(&spec(nb.inputs.len(), nb.units), &mut rng)?,
                });
                start += nb.units;
            }
        }
    }
    ConceptPredictor::from_branches(input_dim, schema, ext.h - ext.k, branches)
}

fn to_f64<T: Scalar>(a: ArrayView2<T>) -> Array2<f64> {
    a.mapv(|v| v.as_f64())
}

/// Largest bin count `<= bins` with at least ten samples per joint cell.
pub fn bins_for_sample(n: usize, bins: usize) -> usize {
    bins.min(((n / 10) as f64).sqrt().floor() as usize)
}

/// Histogram sum-MI among the learned units `k..`, with bins reduced to fit
/// the sample; `None` when even two bins are too many.
pub fn new_unit_mi(z: ArrayView2<f64>, k: usize, bins: usize) -> Option<f64> {
    let bins = bins_for_sample(z.nrows(), bins);
    if bins < 2 {
        return None;
    }
    pairwise_mi_histogram(z, bins, Binning::EqualWidth, MiScope::NewOnly, k)
        .ok()
        .map(|r| r.sum)
}

struct ExtendedRegularizer {
    cfg: ExtendedBottleneckConfig,
    mine: Option<MineEstimator>,
}

impl<T: Scalar> JointRegularizer<T> for ExtendedRegularizer {
    fn begin_epoch(&mut self, _epoch: usize, g: &ConceptPredictor<T>, x_train: ArrayView2<T>) -> Result<Option<f64>> {
        let z = to_f64(g.forward(x_train)?.view());
        let k = self.cfg.k;
        match self.mine.as_mut() {
            Some(m) => {
                let (a, b) = (z.slice(s![.., ..k]), z.slice(s![.., k..]));
                m.train(a, b)?;
                Ok(Some(m.estimate(a, b)))
            }
            None => Ok(new_unit_mi(z.view(), k, self.cfg.mi_bins)),
        }
    }

    fn batch(&mut self, g: &ConceptPredictor<T>, cache: &ConceptCache<T>) -> Result<RegTerm<T>> {
        let k = self.cfg.k;
        let h = self.cfg.h;
        let z = to_f64(cache.activated.view());
        let empty = || RegTerm {
            loss: T::zero(),
            d_activated: None,
            d_params: None,
            injections: Vec::new(),
        };
        let vector_term = |loss: f64, d: Array2<f64>, units: &[usize]| {
            let (d_params, injections) =
                vector_backward(g, cache, units, self.cfg.vector_representation, d.view());
            RegTerm {
                loss: T::of(loss),
                d_activated: None,
                d_params,
                injections,
            }
        };
        let all: Vec<usize> = (0..h).collect();
        Ok(match self.cfg.regularizer {
            RegularizerKind::None => empty(),
            RegularizerKind::MineMi => {
                let m = self.mine.as_mut().expect("MINE estimator present");
                let obj = m.objective_with_input_grad(z.slice(s![.., ..k]), z.slice(s![.., k..]));
                let mut d = Array2::zeros(z.raw_dim());
                d.slice_mut(s![.., ..k]).assign(&obj.d_a);
                d.slice_mut(s![.., k..]).assign(&obj.d_b);
                RegTerm {
                    loss: T::of(obj.value),
                    d_activated: Some(d.mapv(T::of)),
                    d_params: None,
                    injections: Vec::new(),
                }
            }
            RegularizerKind::PairwiseMiNew => {
                let units: Vec<usize> = (k..h).collect();
                let bins = bins_for_sample(z.nrows(), self.cfg.mi_bins).max(2);
                let (loss, d) = soft_pairwise_mi(z.view(), &units, bins);
                RegTerm {
                    loss: T::of(loss),
                    d_activated: Some(d.mapv(T::of)),
                    d_params: None,
                    injections: Vec::new(),
                }
            }
            RegularizerKind::Angular => {
                let rep = vectors_from_cache(g, Some(cache), &all, self.cfg.vector_representation)?;
                let (loss, d) = angular_diversification_loss(rep.vectors.view(), self.cfg.alpha, self.cfg.abs_cos)?;
                vector_term(loss, d, &all)
            }
            RegularizerKind::Orthogonality => {
                let rep = vectors_from_cache(g, Some(cache), &all, self.cfg.vector_representation)?;
                let (loss, d) = orthogonality_penalty(rep.vectors.view())?;
                vector_term(loss, d, &all)
            }
        })
    }
}

/// Joint training of a width-`h` bottleneck where only the first `k` units
/// carry concept loss, plus `reg_weight` times the configured regularizer.
/// The statistics network, when used, is trained further before every epoch.
pub fn train_extended_joint<T: Scalar>(
    dataset: &ConceptDataset<T>,
    split: &DataSplit,
    ext: &ExtendedBottleneckConfig,
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<BottleneckModel<T>> {
    cfg.validate()?;
    let g = build_extended_predictor(dataset.input_dim(), &dataset.schema, ext, cfg)?;
    let mine = match ext.regularizer {
        RegularizerKind::MineMi => Some(MineEstimator::new(ext.k, ext.h - ext.k, &ext.statistics_net)?),
        _ => None,
    };
    let mut reg = ExtendedRegularizer {
        cfg: ext.clone(),
        mine,
    };
    let mut log = TrainingLog::default();
    let (g, f) = fit_joint(
        g,
        dataset,
        split,
        lambda,
        cfg,
        Some((&mut reg as &mut dyn JointRegularizer<T>, ext.reg_weight)),
        "extended",
        &mut log,
    )?;
    let mut model = BottleneckModel::assemble(g, f, dataset, TrainingMode::ExtendedJoint, Some(lambda), log);
    model.extended = Some(ext.clone());
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_dataset, ConceptSchema, TaskKind};
    use crate::models::{joint_batch, ConceptLoss, TargetLoss, TargetPredictor};
    use crate::nn::Activation;
    use crate::regularizers::{InputMasking, NewBranchSpec, VectorRepresentationKind};
    use crate::synth::{generate_task, SyntheticSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        g: ConceptPredictor<f64>,
        f: TargetPredictor<f64>,
        x: Array2<f64>,
        truth: Array2<f64>,
        y: ndarray::Array1<f64>,
    }

    fn fixture(ext: &ExtendedBottleneckConfig) -> Fixture {
        let schema = ConceptSchema::scalar(&["a", "b"]).unwrap();
        let cfg = TrainConfig {
            g_hidden: vec![6],
            ..TrainConfig::default()
        };
        let g = build_extended_predictor::<f64>(5, &schema, ext, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = TargetPredictor::new(ext.h, &[4], Activation::Tanh, TaskKind::Regression, 1, &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((7, 5), || rng.random_range(-1.0..1.0));
        let truth = Array2::from_shape_simple_fn((7, 2), || rng.random_range(-1.0..1.0));
        let y = ndarray::Array1::from_shape_simple_fn(7, || rng.random_range(-1.0..1.0));
        Fixture { g, f, x, truth, y }
    }

    fn total(fx: &Fixture, reg: &mut ExtendedRegularizer, w: f64) -> f64 {
        let (bl, _) = joint_batch(
            &fx.g,
            &fx.f,
            fx.x.view(),
            fx.truth.view(),
            fx.y.view(),
            0.5,
            ConceptLoss::Mse,
            TargetLoss::Mse,
            Some((reg as &mut dyn JointRegularizer<f64>, w)),
        )
        .unwrap();
        bl.target.unwrap() + 0.5 * bl.concept.unwrap() + w * bl.reg.unwrap()
    }

    fn check_gradients(ext: ExtendedBottleneckConfig) {
        let mut fx = fixture(&ext);
        let mut reg = ExtendedRegularizer { cfg: ext.clone(), mine: None };
        let w = 0.8;
        let (_, grads) = joint_batch(
            &fx.g,
            &fx.f,
            fx.x.view(),
            fx.truth.view(),
            fx.y.view(),
            0.5,
            ConceptLoss::Mse,
            TargetLoss::Mse,
            Some((&mut reg as &mut dyn JointRegularizer<f64>, w)),
        )
        .unwrap();
        let n_g = fx.g.params_mut().len();
        let h = 1e-6;
        for (si, gs) in grads.iter().enumerate().take(n_g) {
            for (pi, &analytic) in gs.iter().enumerate() {
                fx.g.params_mut()[si][pi] += h;
                let lp = total(&fx, &mut reg, w);
                fx.g.params_mut()[si][pi] -= 2.0 * h;
                let lm = total(&fx, &mut reg, w);
                fx.g.params_mut()[si][pi] += h;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - analytic).abs() / fd.abs().max(1e-3);
                assert!(
                    err < 1e-4,
                    "{:?}/{:?} slice {si} param {pi}: fd {fd} analytic {analytic}",
                    ext.regularizer,
                    ext.vector_representation
                );
            }
        }
    }

    fn config(kind: RegularizerKind, rep: VectorRepresentationKind) -> ExtendedBottleneckConfig {
        let mut ext = ExtendedBottleneckConfig::new(2, 4, kind);
        ext.vector_representation = rep;
        if rep == VectorRepresentationKind::BlockProjection {
            ext.block_width = Some(3);
        }
        ext
    }

    #[test]
    fn vector_regularizer_gradients_match_finite_differences() {
        for rep in [VectorRepresentationKind::LastLayerWeights, VectorRepresentationKind::BlockProjection] {
            for kind in [RegularizerKind::Angular, RegularizerKind::Orthogonality] {
                check_gradients(config(kind, rep));
            }
            let mut raw = config(RegularizerKind::Angular, rep);
            raw.abs_cos = false;
            check_gradients(raw);
        }
    }

    #[test]
    fn masked_branches_gradients_match_finite_differences() {
        let mut ext = config(RegularizerKind::Orthogonality, VectorRepresentationKind::LastLayerWeights);
        ext.masking = Some(InputMasking {
            specified_inputs: Some(vec![0, 1, 2]),
            new_branches: vec![NewBranchSpec { inputs: vec![3, 4], units: 2 }],
        });
        check_gradients(ext);
    }

    #[test]
    fn zero_weight_matches_plain_joint_loss() {
        let ext = config(RegularizerKind::Orthogonality, VectorRepresentationKind::LastLayerWeights);
        let fx = fixture(&ext);
        let mut reg = ExtendedRegularizer { cfg: ext, mine: None };
        let with = joint_batch(
            &fx.g, &fx.f, fx.x.view(), fx.truth.view(), fx.y.view(), 0.5,
            ConceptLoss::Mse, TargetLoss::Mse, Some((&mut reg as &mut dyn JointRegularizer<f64>, 0.0)),
        )
        .unwrap();
        let without = joint_batch(
            &fx.g, &fx.f, fx.x.view(), fx.truth.view(), fx.y.view(), 0.5,
            ConceptLoss::Mse, TargetLoss::Mse, None,
        )
        .unwrap();
        assert_eq!(with.1, without.1);
    }

    #[test]
    fn extended_training_runs_and_logs() {
        let spec = SyntheticSpec::leaky(12, 2, 400, 0.5, 2);
        let ds = generate_task::<f64>(&spec, 2).unwrap().dataset;
        let split = split_dataset(&ds, (0.7, 0.15, 0.15), 2).unwrap();
        let cfg = TrainConfig {
            g_hidden: vec![8],
            f_hidden: vec![4],
            epochs: 3,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let ext = ExtendedBottleneckConfig::new(2, 4, RegularizerKind::PairwiseMiNew);
        let m = train_extended_joint(&ds, &split, &ext, 1.0, &cfg).unwrap();
        assert_eq!(m.mode, TrainingMode::ExtendedJoint);
        assert_eq!(m.g.output_dim(), 4);
        let log: Vec<_> = m.training_log.phase("extended").collect();
        assert!(!log.is_empty());
        assert!(log.iter().all(|e| e.reg_loss.is_some() && e.mi_estimate.is_some()));
        let bad = ExtendedBottleneckConfig::new(3, 4, RegularizerKind::None);
        assert!(train_extended_joint(&ds, &split, &bad, 1.0, &cfg).unwrap_err().is_validation());
    }
}
