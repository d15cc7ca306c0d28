//! Run configuration: one versioned TOML document covering the model, noise
//! schedule, training, sampling, validation and embedding provider.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttm_core::conditioning::{EmbeddingProvider, FileProvider, HashProvider};
use ttm_core::sampling::SamplerConfig;
use ttm_core::schedule::ScheduleSpec;
use ttm_core::training::TrainConfig;
use ttm_core::unet::{GlobalMode, UNetConfig};
use ttm_core::Scalar;

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable naming the default root for datasets, runs and samples.
pub const OUTPUT_ROOT_ENV: &str = "TTM_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "ttm-output";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

pub fn default_dataset_dir() -> PathBuf {
    output_root().join("data")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Deterministic hashed token vectors.
    Hash { seed: u64 },
    /// Precomputed `EMB1` files named after the prompt tokens.
    File { dir: PathBuf },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Hash { seed: 0 }
    }
}

impl ProviderConfig {
    /// A provider with the widths `model` expects.
    pub fn build<T: Scalar>(&self, model: &UNetConfig) -> Box<dyn EmbeddingProvider<T>> {
        let global_dim = (model.global_mode == GlobalMode::Provider).then_some(model.provider_global_dim);
        match self {
            ProviderConfig::Hash { seed } => Box::new(HashProvider {
                local_dim: model.local_dim,
                global_dim,
                seed: *seed,
            }),
            ProviderConfig::File { dir } => Box::new(FileProvider {
                dir: dir.clone(),
                local_dim: model.local_dim,
                global_dim,
            }),
        }
    }
}

/// Prompts sampled at each validation point during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub num_prompts: usize,
    pub sampling_steps: usize,
    /// Largest sampling batch.
    pub batch: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            num_prompts: 32,
            sampling_steps: 10,
            batch: 64,
        }
    }
}

/// Held-out evaluation used by `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub num_prompts: usize,
    pub batch: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            num_prompts: 64,
            batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    /// Dataset directory; defaults to `$TTM_OUTPUT_ROOT/data`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Run directory; defaults to `$TTM_OUTPUT_ROOT/runs/<name>`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_name() -> String {
    "run".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            name: default_name(),
            dataset: None,
            output_dir: None,
            provider: ProviderConfig::default(),
            model: UNetConfig::default(),
            schedule: ScheduleSpec::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            validation: ValidationConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.version != CONFIG_VERSION {
            p.push(format!("version: expected {CONFIG_VERSION}, found {}", self.version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            p.push("name: must be a non-empty plain file name".into());
        }
        p.extend(self.model.problems().into_iter().map(|s| format!("model: {s}")));
        p.extend(self.train.problems().into_iter().map(|s| format!("train: {s}")));
        if let Err(e) = self.sampler.validate() {
            p.push(format!("sampler: {e}"));
        }
        if self.schedule.num_steps == 0 {
            p.push("schedule: num_steps must be positive".into());
        } else if self.sampler.num_sampling_steps > self.schedule.num_steps {
            p.push("sampler: num_sampling_steps exceeds schedule.num_steps".into());
        }
        if self.validation.sampling_steps == 0 || self.validation.sampling_steps > self.schedule.num_steps {
            p.push("validation: sampling_steps must lie in 1..=schedule.num_steps".into());
        }
        if self.validation.batch == 0 || self.evaluation.batch == 0 {
            p.push("validation/evaluation: batch must be positive".into());
        }
        if self.evaluation.num_prompts < 2 {
            p.push("evaluation: num_prompts must be at least 2".into());
        }
        if self.model.global_mode == GlobalMode::Provider && self.model.provider_global_dim == 0 {
            p.push("model: provider mode needs provider_global_dim > 0".into());
        }
        p
    }

    pub fn validate(&self) -> CliResult<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "invalid configuration:\n  - {}",
                problems.join("\n  - ")
            )))
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(default_dataset_dir)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| output_root().join("runs").join(&self.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::parse("version = 1").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.problems().is_empty());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.provider = ProviderConfig::File { dir: "emb".into() };
        cfg.model.global_mode = GlobalMode::Sap;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("version = 1\nlearning_rate = 1.0").is_err());
        assert!(RunConfig::parse("version = 1\n[train]\nlearnin_rate = 1.0").is_err());
    }

    #[test]
    fn problems_are_listed_together() {
        let cfg = RunConfig::parse(
            "version = 2\n[train]\nbatch_size = 0\nlearning_rate = -1.0\n[sampler]\nnum_sampling_steps = 0",
        )
        .unwrap();
        let p = cfg.problems();
        assert!(p.len() >= 4, "{p:?}");
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }
}
