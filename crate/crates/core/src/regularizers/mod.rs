// SPDX-License-Identifier: MIT OR Apache-2.0

//! Extended bottlenecks: `k` supervised concept units followed by `h - k`
//! learned units, with independence and diversity regularizers.

mod angular;
mod extended;
mod mi;
mod mine;

pub use angular::{
    angular_diversification, angular_diversification_loss, orthogonality_penalty, AngularStats,
    COS_CLAMP_EPS,
};
pub use extended::{bins_for_sample, build_extended_predictor, new_unit_mi, train_extended_joint};
pub use mi::{
    bin_column, discrete_entropy, discrete_mi, max_cross_mi, pairwise_mi_histogram,
    soft_pairwise_mi, Binning, MiScope, PairwiseMi,
};
pub use mine::{
    mine_mi_estimate, MineEstimate, MineEstimator, MineObjective, StatisticsNetConfig,
    MINE_MIN_SAMPLES,
};

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};
use crate::models::{ConceptCache, ConceptPredictor};
use crate::nn::{Layer, ParamGrads};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    /// Neural MI between the supervised block and the learned block.
    MineMi,
    /// Soft-histogram pairwise MI among the learned units.
    PairwiseMiNew,
    Angular,
    Orthogonality,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorRepresentationKind {
    /// Incoming weights and bias of the unit in the bottleneck-producing layer.
    #[default]
    LastLayerWeights,
    /// Mean `M`-wide block activation feeding the shared projection.
    BlockProjection,
}

/// A sub-network producing `units` learned units from the listed input columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewBranchSpec {
    pub inputs: Vec<usize>,
    pub units: usize,
}

/// Restricts which input coordinates each part of the bottleneck can read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputMasking {
    /// Inputs of the supervised block; all coordinates when `None`.
    #[serde(default)]
    pub specified_inputs: Option<Vec<usize>>,
    /// Cover units `k..h` in order.
    pub new_branches: Vec<NewBranchSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtendedBottleneckConfig {
    /// Supervised units; must equal the schema's expanded width.
    pub k: usize,
    /// Total bottleneck width.
    pub h: usize,
    pub regularizer: RegularizerKind,
    pub reg_weight: f64,
    /// Weight of the angle-variance term in the angular loss.
    pub alpha: f64,
    pub vector_representation: VectorRepresentationKind,
    /// Block width `M`; required by, and only valid with, block projection.
    pub block_width: Option<usize>,
    /// Angles from `|cos|` (non-obtuse) rather than the signed cosine.
    pub abs_cos: bool,
    /// Bins for the soft-histogram regularizer and the MI monitor.
    pub mi_bins: usize,
    pub masking: Option<InputMasking>,
    pub statistics_net: StatisticsNetConfig,
}

impl Default for ExtendedBottleneckConfig {
    fn default() -> Self {
        Self {
            k: 1,
            h: 2,
            regularizer: RegularizerKind::None,
            reg_weight: 0.1,
            alpha: 0.1,
            vector_representation: VectorRepresentationKind::LastLayerWeights,
            block_width: None,
            abs_cos: true,
            mi_bins: 8,
            masking: None,
            statistics_net: StatisticsNetConfig::default(),
        }
    }
}

impl ExtendedBottleneckConfig {
    pub fn new(k: usize, h: usize, regularizer: RegularizerKind) -> Self {
        Self {
            k,
            h,
            regularizer,
            ..Default::default()
        }
    }

    /// Structural checks; `k_expanded` and `input_dim` come from the dataset when known.
    pub fn validate(&self, k_expanded: Option<usize>, input_dim: Option<usize>) -> Result<()> {
        if self.k < 1 {
            return Err(CbmError::config("extended.k", "must be >= 1"));
        }
        if self.h <= self.k {
            return Err(CbmError::config(
                "extended.h",
                format!("must exceed k (h = {}, k = {})", self.h, self.k),
            ));
        }
        if let Some(ke) = k_expanded {
            if ke != self.k {
                return Err(CbmError::config(
                    "extended.k",
                    format!("schema has {ke} concept units, config says {}", self.k),
                ));
            }
        }
        if !(self.reg_weight >= 0.0) || !self.reg_weight.is_finite() {
            return Err(CbmError::config("extended.reg_weight", "must be finite and >= 0"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(CbmError::config("extended.alpha", "must be finite and >= 0"));
        }
        if self.mi_bins < 2 {
            return Err(CbmError::config("extended.mi_bins", "must be >= 2"));
        }
        match (self.vector_representation, self.block_width) {
            (VectorRepresentationKind::BlockProjection, None) => {
                return Err(CbmError::config(
                    "extended.block_width",
                    "block_projection needs a block width",
                ))
            }
            (VectorRepresentationKind::BlockProjection, Some(0)) => {
                return Err(CbmError::config("extended.block_width", "must be >= 1"))
            }
            (VectorRepresentationKind::LastLayerWeights, Some(_)) => {
                return Err(CbmError::config(
                    "extended.block_width",
                    "only valid with block_projection",
                ))
            }
            _ => {}
        }
        if let Some(m) = &self.masking {
            let total: usize = m.new_branches.iter().map(|b| b.units).sum();
            if total != self.h - self.k {
                return Err(CbmError::config(
                    "extended.masking.new_branches",
                    format!("branches cover {total} units, need h - k = {}", self.h - self.k),
                ));
            }
            let lists = m
                .specified_inputs
                .iter()
                .chain(m.new_branches.iter().map(|b| &b.inputs));
            for cols in lists {
                if cols.is_empty() {
                    return Err(CbmError::config("extended.masking", "empty input list"));
                }
                if let (Some(d), Some(&c)) = (input_dim, cols.iter().max()) {
                    if c >= d {
                        return Err(CbmError::config(
                            "extended.masking",
                            format!("input column {c} out of range for d = {d}"),
                        ));
                    }
                }
            }
            if m.new_branches.iter().any(|b| b.units == 0) {
                return Err(CbmError::config("extended.masking", "branch with zero units"));
            }
        }
        self.statistics_net.validate()
    }
}

/// One vector per bottleneck unit (rows of `vectors`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorRepresentation {
    pub vectors: Array2<f64>,
    pub source: VectorRepresentationKind,
}

fn locate<T: Scalar>(g: &ConceptPredictor<T>, unit: usize) -> (usize, usize) {
    for (bi, b) in g.branches.iter().enumerate() {
        let w = b.net.output_dim();
        if unit >= b.out_start && unit < b.out_start + w {
            return (bi, unit - b.out_start);
        }
    }
    unreachable!("branches tile the output")
}

fn last_dense<T: Scalar>(g: &ConceptPredictor<T>, bi: usize) -> Result<(&Array2<T>, &ndarray::Array1<T>)> {
    g.branches[bi].net.last_dense().ok_or_else(|| {
        CbmError::Invalid("last_layer_weights needs a dense bottleneck layer".into())
    })
}

fn block_layer<T: Scalar>(g: &ConceptPredictor<T>, bi: usize) -> Result<(usize, usize)> {
    let layers = &g.branches[bi].net.layers;
    match layers.last() {
        Some(Layer::BlockProjection { beta, .. }) => Ok((layers.len() - 1, beta.len())),
        _ => Err(CbmError::Invalid(
            "block_projection needs a block-projection bottleneck layer".into(),
        )),
    }
}

fn rows_of<T: Scalar>(units: &[usize], vecs: Vec<Vec<f64>>, kind: VectorRepresentationKind) -> Result<VectorRepresentation> {
    let len = vecs[0].len();
    if vecs.iter().any(|v| v.len() != len) {
        return Err(CbmError::Invalid(
            "unit vectors have unequal lengths; branches need matching last hidden widths".into(),
        ));
    }
    let flat: Vec<f64> = vecs.into_iter().flatten().collect();
    Ok(VectorRepresentation {
        vectors: Array2::from_shape_vec((units.len(), len), flat).expect("consistent shape"),
        source: kind,
    })
}

/// Vectors for `units` of `g`. `cache` supplies the reference batch for
/// block projection.
pub(crate) fn vectors_from_cache<T: Scalar>(
    g: &ConceptPredictor<T>,
    cache: Option<&ConceptCache<T>>,
    units: &[usize],
    kind: VectorRepresentationKind,
) -> Result<VectorRepresentation> {
    let mut vecs = Vec::with_capacity(units.len());
    for &u in units {
        let (bi, j) = locate(g, u);
        let v = match kind {
            VectorRepresentationKind::LastLayerWeights => {
                let (w, b) = last_dense(g, bi)?;
                let mut v: Vec<f64> = w.column(j).iter().map(|x| x.as_f64()).collect();
                v.push(b[j].as_f64());
                v
            }
            VectorRepresentationKind::BlockProjection => {
                let (l, m) = block_layer(g, bi)?;
                let cache = cache.ok_or_else(|| CbmError::Invalid("block_projection needs a reference batch".into()))?;
                let act = &cache.branches[bi].inputs[l];
                if act.nrows() == 0 {
                    return Err(CbmError::Invalid("empty reference batch".into()));
                }
                act.slice(s![.., j * m..(j + 1) * m])
                    .mean_axis(Axis(0))
                    .expect("non-empty")
                    .iter()
                    .map(|x| x.as_f64())
                    .collect()
            }
        };
        vecs.push(v);
    }
    rows_of::<T>(units, vecs, kind)
}

/// Per-unit vectors of every bottleneck unit of `g`. Block projection
/// averages over `reference`.
pub fn extract_vector_representation<T: Scalar>(
    g: &ConceptPredictor<T>,
    kind: VectorRepresentationKind,
    reference: Option<ArrayView2<T>>,
) -> Result<VectorRepresentation> {
    let units: Vec<usize> = (0..g.output_dim()).collect();
    let cache = match (kind, reference) {
        (VectorRepresentationKind::BlockProjection, Some(x)) => Some(g.forward_cached(x)?),
        _ => None,
    };
    vectors_from_cache(g, cache.as_ref(), &units, kind)
}

/// Route a gradient w.r.t. unit vectors back to `g`: parameter gradients
/// for last-layer weights, hidden injections for block activations.
pub(crate) fn vector_backward<T: Scalar>(
    g: &ConceptPredictor<T>,
    cache: &ConceptCache<T>,
    units: &[usize],
    kind: VectorRepresentationKind,
    d_vectors: ArrayView2<f64>,
) -> (Option<ParamGrads<T>>, Vec<Vec<(usize, Array2<T>)>>) {
    match kind {
        VectorRepresentationKind::LastLayerWeights => {
            let mut grads: ParamGrads<T> = g
                .branches
                .iter()
                .flat_map(|b| b.net.params().into_iter().map(|p| vec![T::zero(); p.len()]))
                .collect();
            let mut offsets = Vec::new();
            let mut acc = 0;
            for n in g.slices_per_branch() {
                offsets.push(acc);
                acc += n;
            }
            for (row, &u) in units.iter().enumerate() {
                let (bi, j) = locate(g, u);
                let net = &g.branches[bi].net;
                let nslices = net.params().len();
                let wi = offsets[bi] + nslices - 2;
                let out = net.output_dim();
                let fan_in = d_vectors.ncols() - 1;
                for r in 0..fan_in {
                    grads[wi][r * out + j] += T::of(d_vectors[[row, r]]);
                }
                grads[wi + 1][j] += T::of(d_vectors[[row, fan_in]]);
            }
            (Some(grads), Vec::new())
        }
        VectorRepresentationKind::BlockProjection => {
            let mut inj: Vec<Vec<(usize, Array2<T>)>> = vec![Vec::new(); g.branches.len()];
            for (row, &u) in units.iter().enumerate() {
                let (bi, j) = locate(g, u);
                let (l, m) = block_layer(g, bi).expect("validated architecture");
                let act = &cache.branches[bi].inputs[l];
                let n = act.nrows();
                if inj[bi].is_empty() {
                    inj[bi].push((l, Array2::zeros(act.raw_dim())));
                }
                let dst = &mut inj[bi][0].1;
                for k in 0..m {
                    let v = T::of(d_vectors[[row, k]] / n as f64);
                    dst.column_mut(j * m + k).fill(v);
                }
            }
            (None, inj)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ConceptSchema;
    use crate::models::Branch;
    use crate::nn::{Mlp, MlpSpec};
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_g_vectors_are_weight_columns() {
        let schema = ConceptSchema::scalar(&["a"]).unwrap();
        let w = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![0.1, 0.2, 0.3];
        let net = Mlp::linear(w.clone(), b.clone());
        let g = ConceptPredictor::from_branches(
            2,
            &schema,
            2,
            vec![Branch {
                inputs: None,
                out_start: 0,
                net,
            }],
        )
        .unwrap();
        let rep = extract_vector_representation(&g, VectorRepresentationKind::LastLayerWeights, None).unwrap();
        assert_eq!(rep.vectors.dim(), (3, 3));
        for u in 0..3 {
            assert_eq!(rep.vectors.row(u).to_vec(), vec![w[[0, u]], w[[1, u]], b[u]]);
        }
        assert!(extract_vector_representation(&g, VectorRepresentationKind::BlockProjection, Some(array![[0.0, 0.0]].view())).is_err());
    }

    #[test]
    fn block_vectors_are_batch_means() {
        let schema = ConceptSchema::scalar(&["a"]).unwrap();
        let mut spec = MlpSpec::new(2, &[], 3);
        spec.block_width = Some(4);
        let net = Mlp::<f64>::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = array![[0.5, -1.0], [1.5, 0.25], [-0.3, 0.7]];
        // Hand computation: block activations are tanh(x W + b) of the first layer.
        let Layer::Dense { weights, bias, activation } = &net.layers[0] else {
            panic!("dense first layer")
        };
        let act = (x.dot(weights) + bias).mapv(|v| activation.apply(v));
        let g = ConceptPredictor::from_branches(
            2,
            &schema,
            2,
            vec![Branch {
                inputs: None,
                out_start: 0,
                net: net.clone(),
            }],
        )
        .unwrap();
        let rep = extract_vector_representation(&g, VectorRepresentationKind::BlockProjection, Some(x.view())).unwrap();
        assert_eq!(rep.vectors.dim(), (3, 4));
        for u in 0..3 {
            for k in 0..4 {
                let mean = (0..3).map(|r| act[[r, u * 4 + k]]).sum::<f64>() / 3.0;
                assert!((rep.vectors[[u, k]] - mean).abs() < 1e-12);
            }
        }
        let _ = Array1::<f64>::zeros(1);
    }

    #[test]
    fn config_validation() {
        let mut c = ExtendedBottleneckConfig::new(3, 3, RegularizerKind::Angular);
        assert!(matches!(c.validate(None, None), Err(CbmError::Config { field, .. }) if field == "extended.h"));
        c.h = 5;
        assert!(c.validate(Some(3), Some(8)).is_ok());
        assert!(c.validate(Some(4), Some(8)).is_err());
        c.vector_representation = VectorRepresentationKind::BlockProjection;
        assert!(c.validate(None, None).is_err());
        c.block_width = Some(4);
        assert!(c.validate(None, None).is_ok());
        c.masking = Some(InputMasking {
            specified_inputs: None,
            new_branches: vec![NewBranchSpec { inputs: vec![9], units: 2 }],
        });
        assert!(c.validate(None, Some(8)).is_err());
    }
}
