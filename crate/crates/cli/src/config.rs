//! Run configuration: a strict TOML schema with validation and a content hash.

use std::fmt;
use std::path::{Path, PathBuf};

use cep_core::bench2d::{BuiltinEnergy, DatasetName};
use cep_core::guidance::{GuidanceMethod, GuidanceTrainConfig};
use cep_core::netcore::{Activation, NetworkSpec, TimeEmbedding};
use cep_core::prior::PriorTrainConfig;
use cep_core::qgpo::QgpoConfig;
use cep_core::sampler::SolverKind;
use cep_core::schedule::Schedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Prior,
    Guidance,
    Sample,
    Compare2d,
    Qgpo,
    OracleGrid,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExperimentKind::Prior => "prior",
            ExperimentKind::Guidance => "guidance",
            ExperimentKind::Sample => "sample",
            ExperimentKind::Compare2d => "compare2d",
            ExperimentKind::Qgpo => "qgpo",
            ExperimentKind::OracleGrid => "oracle-grid",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset: DatasetName,
    pub n: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: DatasetName::EightGaussians,
            n: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub name: BuiltinEnergy,
    pub beta: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        EnergySection {
            name: BuiltinEnergy::Linear,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub log_every: usize,
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            hidden: vec![128, 128, 128],
            steps: 20_000,
            batch_size: 512,
            learning_rate: 1e-4,
            log_every: 100,
            checkpoint: None,
        }
    }
}

impl PriorSection {
    pub fn train_config(&self) -> PriorTrainConfig {
        PriorTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            log_every: self.log_every,
        }
    }

    pub fn network(&self, dim: usize) -> NetworkSpec {
        NetworkSpec::mlp(dim, &self.hidden, dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub method: GuidanceMethod,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    /// Contrast group size `K`.
    pub group_size: usize,
    pub groups_per_step: usize,
    pub log_every: usize,
    /// Load this descriptor instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            method: GuidanceMethod::Cep,
            hidden: vec![128, 128],
            steps: 4000,
            learning_rate: 1e-3,
            group_size: 64,
            groups_per_step: 8,
            log_every: 100,
            checkpoint: None,
        }
    }
}

impl GuidanceSection {
    pub fn train_config(&self) -> GuidanceTrainConfig {
        GuidanceTrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            group_size: self.group_size,
            groups_per_step: self.groups_per_step,
            log_every: self.log_every,
        }
    }

    /// Scalar head over `dim` inputs, conditioned on `cond_dim` one-hot classes.
    pub fn network(&self, dim: usize, cond_dim: usize) -> NetworkSpec {
        NetworkSpec::mlp(dim, &self.hidden, 1)
            .with_time_embedding(TimeEmbedding::Sinusoidal(16))
            .with_activation(Activation::Silu)
            .with_cond_dim(cond_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub method: SolverKind,
    pub steps: usize,
    pub guidance_scale: f64,
    pub n_samples: usize,
    /// Requested class for conditional guidance.
    pub class: Option<usize>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            method: SolverKind::Solver2,
            steps: 25,
            guidance_scale: 1.0,
            n_samples: 4096,
            class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub betas: Vec<f64>,
    pub methods: Vec<GuidanceMethod>,
    pub bins: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            betas: vec![1.0, 10.0],
            methods: vec![
                GuidanceMethod::None,
                GuidanceMethod::Cep,
                GuidanceMethod::Mse,
                GuidanceMethod::Emse,
                GuidanceMethod::Dps,
            ],
            bins: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub points_per_axis: usize,
    pub times: Vec<f64>,
    /// Atoms of the empirical prior; defaults to the dataset size.
    pub atoms: Option<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            lo: -4.0,
            hi: 4.0,
            points_per_axis: 41,
            times: vec![1e-3, 0.25, 0.5, 0.75, 1.0],
            atoms: Some(10_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    /// Base seed; every stage seed is derived from it.
    pub seed: u64,
    /// Used when `--out` is not given. Not part of the config hash.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub energy: EnergySection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub qgpo: QgpoConfig,
}

/// Stage seeds derived from the base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub data: u64,
    pub prior: u64,
    pub guidance: u64,
    pub sampler: u64,
    pub ground_truth: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Seeds {
            data: base,
            prior: base.wrapping_add(1),
            guidance: base.wrapping_add(2),
            sampler: base.wrapping_add(3),
            ground_truth: base.wrapping_add(4),
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_beta(what: &str, beta: f64) -> CliResult<()> {
    if beta >= 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(config_error(format!("{what} must be a finite inverse temperature >= 0, got {beta}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        let seed = config.seed;
        let config = config.with_seed(seed);
        config.validate()?;
        Ok(config)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_base(self.seed)
    }

    /// Replaces the base seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.qgpo.seeds = cep_core::qgpo::QgpoSeeds::from_base(seed);
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        check_beta("energy.beta", self.energy.beta)?;
        for &b in &self.compare.betas {
            check_beta("compare.betas entry", b)?;
        }
        self.schedule.validate().map_err(|e| config_error(format!("schedule: {e}")))?;
        let s = &self.sampler;
        if s.steps == 0 {
            return Err(config_error("sampler.steps must be >= 1"));
        }
        if !(s.guidance_scale >= 0.0 && s.guidance_scale.is_finite()) {
            return Err(config_error("sampler.guidance_scale must be finite and >= 0"));
        }
        if let (Some(c), Some(n)) = (s.class, self.data.dataset.n_classes()) {
            if c >= n {
                return Err(config_error(format!(
                    "sampler.class {c} does not exist in {} ({n} classes)",
                    self.data.dataset
                )));
            }
        }
        self.prior
            .train_config()
            .validate()
            .map_err(|e| config_error(format!("prior: {e}")))?;
        if self.prior.hidden.contains(&0) || self.guidance.hidden.contains(&0) {
            return Err(config_error("hidden widths must be >= 1"));
        }
        if self.guidance.method.is_trained() {
            self.guidance
                .train_config()
                .validate()
                .map_err(|e| config_error(format!("guidance: {e}")))?;
        }
        if self.guidance.method.is_conditional() && self.data.dataset.n_classes().is_none() {
            return Err(config_error(format!(
                "guidance.method {} needs a labelled dataset; {} has no classes",
                self.guidance.method, self.data.dataset
            )));
        }
        if self.compare.methods.iter().any(|m| m.is_conditional()) {
            return Err(config_error("compare.methods takes energy-guided methods only"));
        }
        let g = &self.grid;
        if !(g.lo < g.hi) {
            return Err(config_error("grid.lo must be below grid.hi"));
        }
        if g.times.iter().any(|&t| !(t > 0.0 && t <= self.schedule.t_max)) {
            return Err(config_error("grid.times must lie in (0, t_max]"));
        }
        self.qgpo.validate().map_err(|e| config_error(format!("qgpo: {e}")))?;
        if self.kind == ExperimentKind::Sample && self.prior.checkpoint.is_none() {
            return Err(config_error("sample runs need prior.checkpoint"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config = RunConfig::from_toml(&text)?;
    log::info!("config {} ({}): {:?}", path.display(), config.hash(), config);
    Ok(config)
}
