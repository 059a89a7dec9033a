//! Engine configuration file (TOML, `version = 1`).
//!
//! ```toml
//! version = 1
//! seed = 7
//! samples = 100
//! particles = 128
//! workers = 4
//! data = "observations.csv"
//! output = "out"
//!
//! [model]
//! name = "ibm"
//! [model.settings]
//! observations = 10
//!
//! [[parameters]]
//! name = "k_prey"
//! initial = 25.0
//! proposal_scale = 1.0
//! prior = { kind = "uniform", lower = 5.0, upper = 60.0 }
//! ```
//!
//! Relative `data` and `output` paths are resolved against the directory of
//! the configuration file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{ExecutorConfig, FaultInjection};
use crate::filter::ResamplingScheme;
use crate::model::{ModelFactory, ModelRegistry};
use crate::params::Parameters;
use crate::sampler::{MetropolisHastings, Prior, PriorKind};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub version: u32,
    /// Root of every random stream; also the chain index.
    pub seed: u64,
    pub samples: u64,
    pub particles: usize,
    pub workers: usize,
    #[serde(default)]
    pub resampling: ResamplingScheme,
    #[serde(default = "default_window")]
    pub acceptance_window: usize,
    /// Observation CSV read by `run` and written by `synth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Simulated delay on every particle transfer.
    #[serde(default)]
    pub transfer_latency_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    pub model: ModelSection,
    pub parameters: Vec<ParameterSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub settings: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    pub initial: f64,
    pub proposal_scale: f64,
    pub prior: PriorKind,
}

fn default_window() -> usize {
    20
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_timeout() -> u64 {
    120
}

impl EngineConfig {
    /// Parses and validates without touching the file system.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config =
            Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        config.data = config.data.map(|d| base.join(d));
        config.output = base.join(&config.output);
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("unsupported config version {}, expected {CONFIG_VERSION}", self.version));
        }
        if self.samples == 0 {
            return fail("samples must be ≥ 1".into());
        }
        if self.particles == 0 {
            return fail("particles must be ≥ 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be ≥ 1".into());
        }
        if self.acceptance_window == 0 {
            return fail("acceptance_window must be ≥ 1".into());
        }
        if self.timeout_s == 0 {
            return fail("timeout_s must be ≥ 1".into());
        }
        if self.parameters.is_empty() {
            return fail("at least one [[parameters]] entry is required".into());
        }
        let prior = self.prior()?;
        let initial = self.initial()?;
        if prior.log_density(&initial)? == f64::NEG_INFINITY {
            return fail("initial parameters lie outside the prior support".into());
        }
        MetropolisHastings::new(prior, self.proposal_scales(), self.seed)?;
        Ok(())
    }

    pub fn prior(&self) -> Result<Prior> {
        Prior::new(self.parameters.iter().map(|p| (p.name.clone(), p.prior)))
    }

    pub fn initial(&self) -> Result<Parameters> {
        Parameters::from_pairs(self.parameters.iter().map(|p| (p.name.clone(), p.initial)))
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn proposal_scales(&self) -> Vec<(String, f64)> {
        self.parameters
            .iter()
            .map(|p| (p.name.clone(), p.proposal_scale))
            .collect()
    }

    pub fn sampler(&self) -> Result<MetropolisHastings> {
        MetropolisHastings::new(self.prior()?, self.proposal_scales(), self.seed)
    }

    pub fn factory(&self, registry: &ModelRegistry) -> Result<Arc<dyn ModelFactory>> {
        registry.build(&self.model.name, &self.model.settings)
    }

    pub fn executor_config(&self, fault: Option<FaultInjection>) -> ExecutorConfig {
        ExecutorConfig {
            workers: self.workers,
            particles: self.particles,
            resampling: self.resampling,
            transfer_latency: Duration::from_millis(self.transfer_latency_ms),
            timeout: Duration::from_secs(self.timeout_s),
            fault,
        }
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no `data` path configured".into()))
    }
}
