//! Run configuration: one JSON document with every default materialised.

use std::fs;
use std::path::{Path, PathBuf};

use proxygate_core::experiments::{ExperimentSetup, PromptConfig, PromptSet};
use proxygate_core::trainer::ProxyConfig;
use proxygate_core::{Generator, OracleSpec, SkamConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::genspec::GeneratorSpec;

pub const DEFAULT_SEED: u64 = 42;

/// Either a path to a generator spec (relative to the config file) or the
/// spec itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratorSource {
    Path(PathBuf),
    Inline(Box<GeneratorSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub histogram_bins: usize,
    /// Samples per prompt for the best-of-n baseline; 0 skips it.
    pub best_of_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            histogram_bins: 20,
            best_of_n: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorSource,
    #[serde(default)]
    pub skam: SkamConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub proxy: ProxyConfig,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub prompts: PromptConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Run seed; falls back to `train.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A validated, fully materialised run.
#[derive(Debug, Clone)]
pub struct Run {
    /// Generator inlined, seed resolved.
    pub config: RunConfig,
    pub generator: Generator,
    pub config_hash: String,
    pub seed: u64,
    pub train_prompts: PromptSet,
    pub test_prompts: PromptSet,
}

impl Run {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(CliError::json(path))?;
        Self::from_config(config, path.parent().unwrap_or(Path::new(".")), seed)
    }

    /// Seed precedence: `seed` argument, then `config.seed`, then
    /// `config.train.seed` (which defaults to 42).
    pub fn from_config(mut config: RunConfig, base_dir: &Path, seed: Option<u64>) -> Result<Self> {
        let spec = match &config.generator {
            GeneratorSource::Path(p) => GeneratorSpec::load(&base_dir.join(p))?,
            GeneratorSource::Inline(spec) => (**spec).clone(),
        };
        let generator = spec.build()?;
        config.generator = GeneratorSource::Inline(Box::new(spec));

        let seed = seed.or(config.seed).unwrap_or(config.train.seed);
        config.seed = Some(seed);
        config.train.seed = seed;

        config.skam.validate()?;
        config.train.validate()?;
        config.proxy.validate()?;
        config.prompts.validate()?;
        config.oracle.validate()?;
        config.oracle.check_vocab(generator.vocab_size())?;
        if config.eval.histogram_bins == 0 {
            return Err(CliError::Config {
                field: "histogram_bins",
                reason: "must be positive".into(),
            });
        }

        let config_hash = config_hash(&config);
        let (train_prompts, test_prompts) = config.prompts.build(&generator, &config.skam)?;
        Ok(Self {
            config,
            generator,
            config_hash,
            seed,
            train_prompts,
            test_prompts,
        })
    }

    pub fn setup(&self) -> ExperimentSetup<'_> {
        ExperimentSetup {
            generator: &self.generator,
            skam: &self.config.skam,
            train: &self.config.train,
            proxy: &self.config.proxy,
            oracle: &self.config.oracle,
            train_prompts: &self.train_prompts.prompts,
            test_prompts: &self.test_prompts.prompts,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}", &self.config_hash[..12], self.seed)
    }
}

/// SHA-256 of the compact JSON rendering of a materialised config. Field
/// order follows the struct definitions, so the digest is stable.
pub fn config_hash(config: &RunConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("configs serialise");
    hex::encode(Sha256::digest(&canonical))
}
