// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{Aggregation, AttributionParams};
use crate::data::{ConceptSchema, TaskKind};
use crate::diagnostics::default_alignment_params;
use crate::error::{CbmError, Result};
use crate::io::{read_text, write_text};
use crate::models::{TrainConfig, TrainingMode};
use crate::probes::{InterventionOrdering, SweepWidth};
use crate::regularizers::ExtendedBottleneckConfig;
use crate::render::GridLayout;
use crate::synth::SyntheticSpec;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "CBM_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Factorized blocks with no leak.
    Factorized { d: usize, k: usize, n: usize, seed: u64 },
    /// Factorized blocks plus a target term no concept explains.
    Leaky { d: usize, k: usize, n: usize, leak_strength: f64, seed: u64 },
    /// A fully specified generator.
    Synthetic { spec: SyntheticSpec },
    /// Input matrix plus annotation table joined on `id`.
    Tabular {
        inputs: PathBuf,
        annotations: PathBuf,
        schema: PathBuf,
        task: TaskKind,
    },
    /// A directory written by `save_dataset`.
    Directory { path: PathBuf },
}

impl DataSource {
    /// Generator spec, when the data is synthetic.
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self {
            DataSource::Factorized { d, k, n, seed } => Some(SyntheticSpec::factorized(*d, *k, *n, *seed)),
            DataSource::Leaky { d, k, n, leak_strength, seed } => {
                Some(SyntheticSpec::leaky(*d, *k, *n, *leak_strength, *seed))
            }
            DataSource::Synthetic { spec } => Some(spec.clone()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and test fractions.
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: (0.6, 0.2, 0.2),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub width: SweepWidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionSection {
    pub ordering: InterventionOrdering,
    /// Seeds of the random group orderings.
    pub seeds: Vec<u64>,
}

impl Default for InterventionSection {
    fn default() -> Self {
        Self {
            ordering: InterventionOrdering::Random,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSection {
    /// Leading test rows used; all test rows when 0.
    pub max_rows: usize,
    pub attribution: AttributionParams,
}

impl Default for AlignmentSection {
    fn default() -> Self {
        Self {
            max_rows: 200,
            attribution: default_alignment_params(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySection {
    /// Leading test rows attributed.
    pub rows: usize,
    /// Concept groups attributed; all groups when empty.
    pub groups: Vec<usize>,
    /// Model whose `g` is attributed (first seed).
    pub mode: TrainingMode,
    pub attribution: AttributionParams,
    pub aggregation: Aggregation,
    pub layout: GridLayout,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            rows: 8,
            groups: Vec::new(),
            mode: TrainingMode::Independent,
            attribution: AttributionParams::default(),
            aggregation: Aggregation::Mean,
            layout: GridLayout::default(),
        }
    }
}

/// Everything a run depends on. A run is a pure function of this value and
/// the toolkit version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<TrainingMode>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Joint concept weight; the task default when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Extra joint models trained at each of these weights.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub interventions: Option<InterventionSection>,
    #[serde(default)]
    pub alignment: Option<AlignmentSection>,
    #[serde(default)]
    pub saliency: Option<SaliencySection>,
    /// Required when `modes` contains `extended_joint`.
    #[serde(default)]
    pub extended: Option<ExtendedBottleneckConfig>,
    /// Output root; takes precedence over flags and the environment.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_modes() -> Vec<TrainingMode> {
    vec![TrainingMode::Independent, TrainingMode::Sequential, TrainingMode::Joint]
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, data: DataSource) -> Self {
        Self {
            name: name.into(),
            data,
            split: SplitConfig::default(),
            seeds: default_seeds(),
            modes: default_modes(),
            train: TrainConfig::default(),
            lambda: None,
            lambda_grid: Vec::new(),
            sweep: None,
            interventions: None,
            alignment: None,
            saliency: None,
            extended: None,
            output_dir: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CbmError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_text(path)?)
            .map_err(|e| CbmError::config(path.display().to_string(), e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_toml_string())
    }

    fn has(&self, mode: TrainingMode) -> bool {
        self.modes.contains(&mode)
    }

    /// Checks that need no data. Everything here fails before training.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CbmError::config("name", "must be non-empty without path separators"));
        }
        if self.seeds.is_empty() {
            return Err(CbmError::config("seeds", "at least one seed is required"));
        }
        if self.modes.is_empty() {
            return Err(CbmError::config("modes", "at least one training mode is required"));
        }
        self.train.validate()?;
        let (a, b, c) = self.split.fractions;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CbmError::config("split.fractions", "must be in [0, 1] and sum to 1"));
        }
        for (field, l) in self
            .lambda
            .iter()
            .map(|l| ("lambda", *l))
            .chain(self.lambda_grid.iter().map(|l| ("lambda_grid", *l)))
        {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(CbmError::config(field, format!("{l} is not a finite non-negative weight")));
            }
        }
        if let Some(spec) = self.data.synthetic_spec() {
            spec.validate()?;
        }
        match (&self.extended, self.has(TrainingMode::ExtendedJoint)) {
            (Some(ext), _) => ext.validate(None, None)?,
            (None, true) => {
                return Err(CbmError::config("extended", "extended_joint mode needs an [extended] section"))
            }
            _ => {}
        }
        if self.alignment.is_some() {
            for m in [TrainingMode::Independent, TrainingMode::Sequential, TrainingMode::Joint] {
                if !self.has(m) {
                    return Err(CbmError::config(
                        "alignment",
                        format!("needs the {} mode to be trained", m.name()),
                    ));
                }
            }
        }
        if let Some(a) = &self.alignment {
            a.attribution.validate()?;
        }
        if let Some(s) = &self.saliency {
            s.attribution.validate()?;
            if !self.has(s.mode) {
                return Err(CbmError::config("saliency.mode", format!("{} is not trained", s.mode.name())));
            }
        }
        if let Some(InterventionSection { seeds, .. }) = &self.interventions {
            if seeds.is_empty() {
                return Err(CbmError::config("interventions.seeds", "at least one seed is required"));
            }
        }
        Ok(())
    }

    /// Checks against the loaded schema and input width.
    pub fn validate_against(&self, schema: &ConceptSchema, input_dim: usize) -> Result<()> {
        if let Some(ext) = &self.extended {
            ext.validate(Some(schema.k_expanded()), Some(input_dim))?;
        }
        if let Some(s) = &self.saliency {
            if let Some(&g) = s.groups.iter().find(|&&g| g >= schema.k_groups()) {
                return Err(CbmError::config("saliency.groups", format!("group {g} out of range")));
            }
        }
        if let Some(InterventionSection { ordering: InterventionOrdering::Fixed(o), .. }) = &self.interventions {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..schema.k_groups()).collect::<Vec<_>>() {
                return Err(CbmError::config(
                    "interventions.ordering",
                    "fixed ordering must list every group once",
                ));
            }
        }
        Ok(())
    }

    /// Content hash of everything but the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// `<root>/<name>-<first 16 hex digits of the hash>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.name, &self.hash()[..16]))
    }

    /// Config value, then `flag`, then the environment, then the default.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| flag.map(Path::to_path_buf))
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }
}
