//! The JSON experiment document shared by `train` and `bench`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssr_core::analysis::BenchOptions;
use ssr_core::moe::{Regularizer, TaskSpec, TrainOptions};
use ssr_core::routing::RouterConfig;

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSettings {
    pub clusters: usize,
    pub d: usize,
    pub tokens: usize,
    pub cluster_std: f64,
    pub min_separation: f64,
    pub experts: usize,
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TaskSettings {
    fn default() -> Self {
        let task = TaskSpec::default();
        let train = TrainOptions::default();
        Self {
            clusters: task.clusters,
            d: task.d,
            tokens: task.tokens,
            cluster_std: task.cluster_std,
            min_separation: task.min_separation,
            experts: 8,
            hidden: 32,
            steps: train.steps,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub coefficient: f64,
    /// Multiplier on the gate's initial standard deviation. Large values give
    /// large gating scores.
    #[serde(default = "unit")]
    pub gate_init_scale: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskSettings,
    pub runs: Vec<RunConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Options for `bench`; ignored by `train`.
    #[serde(default)]
    pub bench: BenchOptions,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("ssr-output")
}

impl ExperimentConfig {
    /// Reads, parses and validates a config file. `SSR_OUTPUT_DIR`, when set,
    /// replaces `output_dir`.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        if let Some(dir) = std::env::var_os("SSR_OUTPUT_DIR").filter(|d| !d.is_empty()) {
            config.output_dir = PathBuf::from(dir);
        }
        config
            .validate()
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.runs.is_empty() {
            return Err("field `runs`: at least one router config is required".into());
        }
        let mut seen = HashSet::new();
        for (i, run) in self.runs.iter().enumerate() {
            if run.name.is_empty() || !run.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(format!(
                    "runs[{i}].name: {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                    run.name
                ));
            }
            if !seen.insert(run.name.as_str()) {
                return Err(format!("runs[{i}].name: duplicate name {:?}", run.name));
            }
            run.router
                .validate(Some(self.task.experts))
                .map_err(|e| format!("runs[{i}].router: {e}"))?;
            if !(run.coefficient >= 0.0 && run.coefficient.is_finite()) {
                return Err(format!("runs[{i}].coefficient: must be >= 0"));
            }
            if !(run.gate_init_scale > 0.0 && run.gate_init_scale.is_finite()) {
                return Err(format!("runs[{i}].gate_init_scale: must be > 0"));
            }
        }
        let t = &self.task;
        if t.clusters < 2 || t.d == 0 || t.tokens == 0 || t.experts < 2 || t.hidden == 0 {
            return Err("task: need clusters >= 2, experts >= 2 and positive d, tokens, hidden".into());
        }
        if t.steps == 0 || t.batch_size == 0 || !(t.learning_rate >= 0.0) {
            return Err("task: need steps >= 1, batch_size >= 1, learning_rate >= 0".into());
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            clusters: self.task.clusters,
            d: self.task.d,
            tokens: self.task.tokens,
            cluster_std: self.task.cluster_std,
            min_separation: self.task.min_separation,
            seed: self.seed,
        }
    }

    /// Seed for one run's initialization and batch order. Runs that share a
    /// router seed share both, so they differ only in routing.
    pub fn run_seed(&self, run: &RunConfig) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(run.router.seed)
            .wrapping_add(1)
    }
}
