//! Run configuration: a single TOML file, validated up front, with
//! `DIRECT_*` environment-variable overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub variational: VariationalSection,
    pub grid: GridSection,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub bnn: Option<BnnSection>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub data: DataSection,
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `glm`, `logistic`, or `bnn`.
    pub kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VariationalSection {
    /// `mean-field` or `mixture`.
    #[serde(default = "default_variational_kind")]
    pub kind: String,
    /// Mixture component count.
    #[serde(default = "default_r")]
    pub r: usize,
    /// Mixture entropy handling: `bound` (deterministic Taylor bound) or
    /// `sgd` (sampled surrogate).
    #[serde(default = "default_entropy")]
    pub entropy: String,
    /// Logit noise when seeding mixture components from the mean-field fit.
    #[serde(default = "default_perturbation")]
    pub init_perturbation: f64,
}

fn default_variational_kind() -> String {
    "mean-field".into()
}

fn default_r() -> usize {
    5
}

fn default_entropy() -> String {
    "bound".into()
}

fn default_perturbation() -> f64 {
    0.1
}

impl Default for VariationalSection {
    fn default() -> Self {
        VariationalSection {
            kind: default_variational_kind(),
            r: default_r(),
            entropy: default_entropy(),
            init_perturbation: default_perturbation(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub m_bar: usize,
    /// Noise-variance grid size; defaults to `m_bar`.
    #[serde(default)]
    pub m_sigma: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    /// Basis-function count for the Fourier feature map (must be even).
    #[serde(default = "default_b")]
    pub b: usize,
    /// `rff` (random Fourier features) or `raw` (standardized inputs).
    #[serde(default = "default_feature_kind")]
    pub kind: String,
}

fn default_b() -> usize {
    256
}

fn default_feature_kind() -> String {
    "rff".into()
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            b: default_b(),
            kind: default_feature_kind(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BnnSection {
    /// Neuron counts per layer; the final entry must be 1.
    pub layer_widths: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// `quasi-newton` or `sgd`.
    #[serde(default = "default_optimizer_kind")]
    pub kind: String,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Monte Carlo samples for stochastic surrogates.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
}

fn default_optimizer_kind() -> String {
    "quasi-newton".into()
}

fn default_max_iters() -> usize {
    1000
}

fn default_tol() -> f64 {
    1e-7
}

fn default_lr() -> f64 {
    1e-2
}

fn default_batch() -> usize {
    256
}

fn default_mc() -> usize {
    3000
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            kind: default_optimizer_kind(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            mc_samples: default_mc(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: PathBuf,
    /// Target column name or zero-based index.
    pub target: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub artifact: PathBuf,
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

impl RunConfig {
    /// Parse a config file, apply `DIRECT_*` environment overrides, and
    /// validate. Every offending key is reported, not just the first.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.apply_env_overrides()?;
        config.validate()?;
        Ok(config)
    }

    /// Environment overrides, one per documented key.
    fn apply_env_overrides(&mut self) -> Result<(), CliError> {
        fn set<T: std::str::FromStr>(slot: &mut T, key: &str) -> Result<(), CliError> {
            if let Ok(raw) = std::env::var(key) {
                *slot = raw
                    .parse()
                    .map_err(|_| CliError::Config(format!("{key}: cannot parse {raw:?}")))?;
            }
            Ok(())
        }
        set(&mut self.seed, "DIRECT_SEED")?;
        set(&mut self.model.kind, "DIRECT_MODEL_KIND")?;
        set(&mut self.variational.kind, "DIRECT_VARIATIONAL_KIND")?;
        set(&mut self.variational.r, "DIRECT_VARIATIONAL_R")?;
        set(&mut self.variational.entropy, "DIRECT_VARIATIONAL_ENTROPY")?;
        set(&mut self.grid.m_bar, "DIRECT_GRID_M_BAR")?;
        if let Ok(raw) = std::env::var("DIRECT_GRID_M_SIGMA") {
            let v = raw
                .parse()
                .map_err(|_| CliError::Config(format!("DIRECT_GRID_M_SIGMA: cannot parse {raw:?}")))?;
            self.grid.m_sigma = Some(v);
        }
        set(&mut self.features.b, "DIRECT_FEATURES_B")?;
        set(&mut self.features.kind, "DIRECT_FEATURES_KIND")?;
        set(&mut self.optimizer.kind, "DIRECT_OPTIMIZER_KIND")?;
        set(&mut self.optimizer.max_iters, "DIRECT_OPTIMIZER_MAX_ITERS")?;
        set(&mut self.optimizer.tol, "DIRECT_OPTIMIZER_TOL")?;
        set(&mut self.optimizer.learning_rate, "DIRECT_OPTIMIZER_LEARNING_RATE")?;
        set(&mut self.optimizer.batch_size, "DIRECT_OPTIMIZER_BATCH_SIZE")?;
        set(&mut self.optimizer.mc_samples, "DIRECT_OPTIMIZER_MC_SAMPLES")?;
        if let Ok(raw) = std::env::var("DIRECT_DATA_DATASET") {
            self.data.dataset = PathBuf::from(raw);
        }
        set(&mut self.data.target, "DIRECT_DATA_TARGET")?;
        if let Ok(raw) = std::env::var("DIRECT_OUTPUT_ARTIFACT") {
            self.output.artifact = PathBuf::from(raw);
        }
        if let Ok(raw) = std::env::var("DIRECT_OUTPUT_TRACE") {
            self.output.trace = Some(PathBuf::from(raw));
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        if !matches!(self.model.kind.as_str(), "glm" | "logistic" | "bnn") {
            problems.push(format!(
                "model.kind: {:?} is not one of glm | logistic | bnn",
                self.model.kind
            ));
        }
        if !matches!(self.variational.kind.as_str(), "mean-field" | "mixture") {
            problems.push(format!(
                "variational.kind: {:?} is not one of mean-field | mixture",
                self.variational.kind
            ));
        }
        if !matches!(self.variational.entropy.as_str(), "bound" | "sgd") {
            problems.push(format!(
                "variational.entropy: {:?} is not one of bound | sgd",
                self.variational.entropy
            ));
        }
        if self.variational.kind == "mixture" && self.variational.r < 2 {
            problems.push("variational.r: mixtures need at least 2 components".into());
        }
        if self.grid.m_bar < 2 {
            problems.push("grid.m_bar: needs at least 2 levels".into());
        }
        if let Some(m_sigma) = self.grid.m_sigma {
            if m_sigma < 2 {
                problems.push("grid.m_sigma: needs at least 2 levels".into());
            }
        }
        if !matches!(self.features.kind.as_str(), "rff" | "raw") {
            problems.push(format!(
                "features.kind: {:?} is not one of rff | raw",
                self.features.kind
            ));
        }
        if self.features.kind == "rff" && self.features.b % 2 != 0 {
            problems.push(format!("features.b: {} must be even for rff", self.features.b));
        }
        if self.model.kind == "bnn" {
            match &self.bnn {
                None => problems.push("bnn.layer_widths: required for model.kind = bnn".into()),
                Some(section) => {
                    if section.layer_widths.last() != Some(&1) {
                        problems.push("bnn.layer_widths: final layer width must be 1".into());
                    }
                    if section.layer_widths.iter().any(|&w| w == 0) {
                        problems.push("bnn.layer_widths: widths must be positive".into());
                    }
                }
            }
        }
        if !matches!(self.optimizer.kind.as_str(), "quasi-newton" | "sgd") {
            problems.push(format!(
                "optimizer.kind: {:?} is not one of quasi-newton | sgd",
                self.optimizer.kind
            ));
        }
        if self.variational.kind == "mixture"
            && self.variational.entropy == "sgd"
            && self.optimizer.kind != "sgd"
        {
            problems.push(
                "optimizer.kind: the sampled entropy surrogate needs optimizer.kind = \"sgd\""
                    .into(),
            );
        }
        if self.optimizer.max_iters == 0 {
            problems.push("optimizer.max_iters: must be positive".into());
        }
        if !(self.optimizer.tol > 0.0) {
            problems.push("optimizer.tol: must be positive".into());
        }
        if !(self.optimizer.learning_rate > 0.0) {
            problems.push("optimizer.learning_rate: must be positive".into());
        }
        if self.optimizer.mc_samples == 0 {
            problems.push("optimizer.mc_samples: must be positive".into());
        }
        if let Some(parent) = self.output.artifact.parent() {
            if !parent.as_os_str().is_empty() && !parent.exists() {
                problems.push(format!(
                    "output.artifact: directory {} does not exist",
                    parent.display()
                ));
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config(problems.join("\n")));
        }
        // A missing dataset file is a data problem, not a config problem.
        if !self.data.dataset.exists() {
            return Err(CliError::Data(format!(
                "dataset {} does not exist",
                self.data.dataset.display()
            )));
        }
        Ok(())
    }

    pub fn m_sigma(&self) -> usize {
        self.grid.m_sigma.unwrap_or(self.grid.m_bar)
    }

    /// Re-emit the effective configuration (after overrides) as TOML.
    pub fn dump(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}
