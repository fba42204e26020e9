// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic synthetic concept tasks with known ground-truth structure.
//!
//! Every input coordinate is drawn i.i.d. as `x = sqrt(3) u` with
//! `u ~ U(-1, 1)`, so coordinates have zero mean and unit variance and
//! coordinates in different partition subsets are independent.
//!
//! Concept `i` reads only the coordinates of its support subset `S_i`:
//!
//! ```text
//! latent_i = (1 / sqrt(|S_i|)) * sum_p  s_p * psi_p(u_{S_i[p]})
//! ```
//!
//! where `psi` cycles through `sqrt(3) u`, `sqrt(2) sin(pi u)` and
//! `sqrt(5) (3u^2 - 1) / 2` (only the first under [`ConceptFn::Linear`]),
//! each with mean 0 and variance 1 on `U(-1, 1)`, and `s_p = ±1` alternates
//! with the position and group index. Each latent therefore has mean 0 and variance 1.
//! Real-valued groups use the latent directly; categorical groups rank-bin it
//! into `K` equally populated classes.
//!
//! The leak term `L` is built the same way from every partition subset no
//! concept references. The target is
//!
//! ```text
//! y = sqrt(1 - leak) * sum_i w_i v_i + sqrt(leak) * L + noise_std * eps
//! ```
//!
//! with `w` normalised to unit length and `v_i` the unit-variance concept value
//! (the latent, or the standardised class index), so the leak term carries a
//! `leak` fraction of the signal variance.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptDataset, ConceptGroup, ConceptSchema, Encoding, TaskKind};
use crate::error::{CbmError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptFn {
    #[default]
    Smooth,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub cardinalities: Vec<usize>,
    pub n: usize,
    /// Disjoint coordinate subsets.
    pub factor_partition: Vec<Vec<usize>>,
    /// Partition subset index read by each concept group.
    pub concept_support: Vec<usize>,
    #[serde(default)]
    pub leak_strength: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub concept_fn: ConceptFn,
    #[serde(default = "default_encoding")]
    pub encoding: Encoding,
    /// Per-concept target weights; equal weights when absent.
    #[serde(default)]
    pub target_weights: Option<Vec<f64>>,
    /// Rank-bin the target into this many classes (classification task).
    #[serde(default)]
    pub target_classes: Option<usize>,
    /// Reject specs where two concepts share a support subset.
    #[serde(default = "default_true")]
    pub require_independent: bool,
}

fn default_encoding() -> Encoding {
    Encoding::Scalar
}
fn default_true() -> bool {
    true
}

impl SyntheticSpec {
    /// `k` real-valued concepts on consecutive blocks of `support` coordinates,
    /// followed by one leak block of `2 * support` coordinates; any remaining
    /// coordinates are distractors.
    pub fn blocks(d: usize, k: usize, support: usize, n: usize, leak_strength: f64, seed: u64) -> Self {
        let mut partition: Vec<Vec<usize>> = (0..k)
            .map(|i| (i * support..(i + 1) * support).collect())
            .collect();
        let leak_start = k * support;
        let leak_end = (leak_start + 2 * support).min(d);
        if leak_end > leak_start {
            partition.push((leak_start..leak_end).collect());
        }
        Self {
            d,
            cardinalities: vec![1; k],
            n,
            factor_partition: partition,
            concept_support: (0..k).collect(),
            leak_strength,
            noise_std: 0.0,
            seed,
            concept_fn: ConceptFn::Smooth,
            encoding: Encoding::Scalar,
            target_weights: None,
            target_classes: None,
            require_independent: true,
        }
    }

    pub fn factorized(d: usize, k: usize, n: usize, seed: u64) -> Self {
        Self::blocks(d, k, 4, n, 0.0, seed)
    }

    pub fn leaky(d: usize, k: usize, n: usize, leak_strength: f64, seed: u64) -> Self {
        Self::blocks(d, k, 4, n, leak_strength, seed)
    }

    pub fn k_groups(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(CbmError::config("d/n", "must be positive"));
        }
        if self.cardinalities.is_empty() || self.cardinalities.contains(&0) {
            return Err(CbmError::config("cardinalities", "need >= 1 group, each cardinality >= 1"));
        }
        let mut owner = vec![None; self.d];
        for (s, subset) in self.factor_partition.iter().enumerate() {
            if subset.is_empty() {
                return Err(CbmError::config("factor_partition", format!("subset {s} is empty")));
            }
            for &j in subset {
                if j >= self.d {
                    return Err(CbmError::config(
                        "factor_partition",
                        format!("coordinate {j} >= d = {}", self.d),
                    ));
                }
                if let Some(o) = owner[j] {
                    return Err(CbmError::config(
                        "factor_partition",
                        format!("coordinate {j} in subsets {o} and {s}"),
                    ));
                }
                owner[j] = Some(s);
            }
        }
        if self.concept_support.len() != self.k_groups() {
            return Err(CbmError::config(
                "concept_support",
                format!("{} entries for {} groups", self.concept_support.len(), self.k_groups()),
            ));
        }
        for (g, &s) in self.concept_support.iter().enumerate() {
            if s >= self.factor_partition.len() {
                return Err(CbmError::config(
                    "concept_support",
                    format!("group {g} names missing subset {s}"),
                ));
            }
            if self.require_independent && self.concept_support[..g].contains(&s) {
                return Err(CbmError::config(
                    "concept_support",
                    format!("group {g} shares subset {s} with another group"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.leak_strength) {
            return Err(CbmError::config("leak_strength", "must be in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CbmError::config("noise_std", "must be >= 0"));
        }
        if self.leak_strength > 0.0 && self.leak_subsets().is_empty() {
            return Err(CbmError::config(
                "leak_strength",
                "positive leak needs a partition subset not used by any concept",
            ));
        }
        if let Some(w) = &self.target_weights {
            if w.len() != self.k_groups() || w.iter().all(|v| *v == 0.0) {
                return Err(CbmError::config("target_weights", "one weight per group, not all zero"));
            }
        }
        if let Some(c) = self.target_classes {
            if c < 2 {
                return Err(CbmError::config("target_classes", "need >= 2 classes"));
            }
        }
        Ok(())
    }

    /// Input coordinates read by concept group `g`.
    pub fn concept_coordinates(&self, g: usize) -> &[usize] {
        &self.factor_partition[self.concept_support[g]]
    }

    pub fn leak_subsets(&self) -> Vec<usize> {
        (0..self.factor_partition.len())
            .filter(|s| !self.concept_support.contains(s))
            .collect()
    }

    pub fn leak_coordinates(&self) -> Vec<usize> {
        self.leak_subsets()
            .into_iter()
            .flat_map(|s| self.factor_partition[s].iter().copied())
            .collect()
    }

    pub fn schema(&self) -> ConceptSchema {
        let groups = self
            .cardinalities
            .iter()
            .enumerate()
            .map(|(i, &c)| ConceptGroup::new(format!("c{i}"), c))
            .collect();
        ConceptSchema::new(groups, self.encoding).expect("validated cardinalities")
    }

    fn weights(&self) -> Vec<f64> {
        let w = self
            .target_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.k_groups()]);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.into_iter().map(|v| v / norm).collect()
    }
}

fn basis(kind: ConceptFn, position: usize, u: f64) -> f64 {
    let which = match kind {
        ConceptFn::Linear => 0,
        ConceptFn::Smooth => position % 3,
    };
    match which {
        0 => 3f64.sqrt() * u,
        1 => 2f64.sqrt() * (std::f64::consts::PI * u).sin(),
        _ => 5f64.sqrt() * (3.0 * u * u - 1.0) / 2.0,
    }
}

/// Unit-variance latent over a coordinate subset.
fn latent(kind: ConceptFn, coords: &[usize], u: &[f64], sign_offset: usize) -> f64 {
    let s: f64 = coords
        .iter()
        .enumerate()
        .map(|(p, &j)| {
            let sign = if (p + sign_offset) % 2 == 0 { 1.0 } else { -1.0 };
            sign * basis(kind, p, u[j])
        })
        .sum();
    s / (coords.len() as f64).sqrt()
}

/// Equal-population class index of each value (ties broken by position).
fn rank_bin(values: &[f64], classes: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * classes / values.len();
    }
    out
}

/// A generated dataset plus the additive pieces of its target.
#[derive(Clone, Debug)]
pub struct SyntheticTask<T> {
    pub dataset: ConceptDataset<T>,
    /// `sqrt(1 - leak) * sum_i w_i v_i`
    pub concept_term: Array1<f64>,
    /// `sqrt(leak) * L`
    pub leak_term: Array1<f64>,
    pub noise_term: Array1<f64>,
}

/// Generate the full task, including target components.
pub fn generate_task<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticTask<T>> {
    spec.validate()?;
    let (n, d, k) = (spec.n, spec.d, spec.k_groups());
    let mut inputs = Array2::<f64>::zeros((n, d));
    let mut latents = Array2::<f64>::zeros((n, k));
    let mut leak = Array1::<f64>::zeros(n);
    let mut noise = Array1::<f64>::zeros(n);
    let leak_coords = spec.leak_coordinates();
    let sqrt3 = 3f64.sqrt();
    let mut u = vec![0.0; d];
    for i in 0..n {
        // One independent stream per sample.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for uj in u.iter_mut() {
            *uj = rng.random_range(-1.0..1.0);
        }
        let eps: f64 = rng.sample(StandardNormal);
        for j in 0..d {
            inputs[[i, j]] = sqrt3 * u[j];
        }
        for g in 0..k {
            latents[[i, g]] = latent(spec.concept_fn, spec.concept_coordinates(g), &u, g);
        }
        if !leak_coords.is_empty() {
            leak[i] = latent(spec.concept_fn, &leak_coords, &u, k);
        }
        noise[i] = spec.noise_std * eps;
    }

    let mut concepts = Array2::<f64>::zeros((n, k));
    let mut values = Array2::<f64>::zeros((n, k));
    for (g, &card) in spec.cardinalities.iter().enumerate() {
        let col = latents.column(g).to_vec();
        if card == 1 {
            concepts.column_mut(g).assign(&latents.column(g));
            values.column_mut(g).assign(&latents.column(g));
        } else {
            let bins = rank_bin(&col, card);
            let mid = (card as f64 - 1.0) / 2.0;
            let sd = ((card * card - 1) as f64 / 12.0).sqrt();
            for i in 0..n {
                concepts[[i, g]] = bins[i] as f64;
                values[[i, g]] = (bins[i] as f64 - mid) / sd;
            }
        }
    }
    let w = spec.weights();
    let a = (1.0 - spec.leak_strength).sqrt();
    let b = spec.leak_strength.sqrt();
    let concept_term = values.dot(&Array1::from(w)) * a;
    let leak_term = leak * b;
    let y = &concept_term + &leak_term + &noise;

    let (targets, task_kind) = match spec.target_classes {
        None => (y, TaskKind::Regression),
        Some(c) => (
            Array1::from(rank_bin(&y.to_vec(), c).into_iter().map(|v| v as f64).collect::<Vec<_>>()),
            TaskKind::Classification,
        ),
    };
    let mut prov_spec = spec.clone();
    prov_spec.seed = seed;
    let dataset = ConceptDataset::new(
        inputs.mapv(T::of),
        concepts.mapv(T::of),
        targets.mapv(T::of),
        spec.schema(),
        task_kind,
        format!("synthetic: {}", serde_json::to_string(&prov_spec)?),
    )?;
    Ok(SyntheticTask {
        dataset,
        concept_term,
        leak_term,
        noise_term: noise,
    })
}

/// Factorized task; `leak_strength = 0` makes the target a function of the concepts alone.
pub fn generate_factorized_task<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<ConceptDataset<T>> {
    Ok(generate_task(spec, seed)?.dataset)
}

/// Task whose target carries input signal not mediated by the concepts.
pub fn generate_leaky_task<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<ConceptDataset<T>> {
    if !(spec.leak_strength > 0.0) {
        return Err(CbmError::config("leak_strength", "leaky task needs leak_strength > 0"));
    }
    generate_factorized_task(spec, seed)
}
