//! Experiment configuration: JSON schema, presets and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json_atomic;
use crate::policy::PolicyConfig;
use crate::suite::{generate_tasks, SuiteConfig, TaskSpec};
use crate::trainer::{Benchmark, RunSetup, Strategy, TrainConfig};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "INFOVLA_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Five tasks on a one-core budget.
    Ci,
    /// Ten tasks with the long schedule.
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub suite_seed: u64,
    pub output_dir: PathBuf,
    pub benchmark: Benchmark,
    pub policy: PolicyConfig,
    pub suite: SuiteConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Ci)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let suite = SuiteConfig {
            grasp_radius: 0.12,
            target_radius: 0.1,
            targets_per_object: 5,
            demo_noise: 0.0,
            ..SuiteConfig::default()
        };
        let train = TrainConfig {
            iterations_base: 3000,
            iterations_incremental: 1000,
            lr: 1e-3,
            demos_per_task: 30,
            ..TrainConfig::default()
        };
        match preset {
            Preset::Ci => Self {
                strategy: Strategy::Infovla,
                seeds: vec![0, 1, 2],
                suite_seed: 0,
                output_dir: PathBuf::from("runs/ci"),
                benchmark: Benchmark::one_by_one(5),
                policy: PolicyConfig::default(),
                suite,
                train,
            },
            Preset::Long => Self {
                strategy: Strategy::Infovla,
                seeds: vec![0, 1, 2],
                suite_seed: 0,
                output_dir: PathBuf::from("runs/long"),
                benchmark: Benchmark::one_by_one(10),
                policy: PolicyConfig::default(),
                suite,
                train: TrainConfig {
                    iterations_base: 3000,
                    iterations_incremental: 600,
                    ..train
                },
            },
        }
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            benchmark: self.benchmark,
            policy: self.policy.clone(),
            suite: self.suite.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds", "must not repeat"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        self.setup().validate()?;
        self.tasks().map(|_| ())
    }

    /// The task suite, determined by `suite_seed` alone.
    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        generate_tasks(self.benchmark.n_tasks, self.suite_seed, &self.suite).map_err(|e| match e {
            Error::Contract(reason) => Error::config("benchmark.n_tasks", reason),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }

    /// `output_dir`, placed under the output-root environment variable when
    /// it is relative and the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
    }
}

pub fn resolve_output(dir: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(root) if dir.is_relative() => root.join(dir),
        _ => dir.to_path_buf(),
    }
}
