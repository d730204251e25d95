//! Run configuration: a versioned TOML file that pins everything a run
//! needs. A run is reproducible from the config file and the code version
//! alone.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use supernet_core::arch::ArchSpace;
use supernet_core::data::{load_dataset, Dataset, DatasetSpec};
use supernet_core::error::{Error, Result};
use supernet_core::schedule::{LrKind, LrSchedule};
use supernet_core::train::{RunnerCfg, ShrinkingPlan};

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "SUPERNET_OUT_DIR";

/// Learning-rate section; the step count is derived from the plan and the
/// dataset at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrConfig {
    pub kind: LrKind,
    pub eta0: f64,
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
}

fn default_floor() -> f64 {
    0.05
}

/// Evaluation defaults used by the pareto subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_buckets")]
    pub num_buckets: usize,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_calib_batches")]
    pub calib_batches: usize,
}

fn default_buckets() -> usize {
    6
}
fn default_samples() -> usize {
    128
}
fn default_calib_batches() -> usize {
    4
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_buckets: default_buckets(),
            num_samples: default_samples(),
            calib_batches: default_calib_batches(),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub metrics_every_steps: u64,
    pub dataset: DatasetSpec,
    pub space: ArchSpace,
    pub plan: ShrinkingPlan,
    pub lr: LrConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_batch_size() -> usize {
    32
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            Error::Validation(format!("config {}: {e}", path.display()))
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Validation(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.space.validate()?;
        cfg.plan.validate()?;
        Ok(cfg)
    }

    /// Output directory: CLI flag > config > environment > `./runs`.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(f) = flag {
            return f.to_path_buf();
        }
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var(OUT_DIR_ENV) {
            return PathBuf::from(d);
        }
        PathBuf::from("runs")
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let dataset = load_dataset(&self.dataset)?;
        if dataset.num_classes != self.space.num_classes {
            return Err(Error::Validation(format!(
                "dataset has {} classes, space declares {}",
                dataset.num_classes, self.space.num_classes
            )));
        }
        Ok(dataset)
    }

    pub fn runner(&self) -> RunnerCfg {
        RunnerCfg {
            batch_size: self.batch_size,
            checkpoint_interval: self.checkpoint_interval,
            metrics_every_steps: self.metrics_every_steps,
        }
    }

    /// Learning-rate schedule over the whole run.
    pub fn lr_schedule(&self, dataset: &Dataset) -> LrSchedule {
        let total_steps = self.plan.total_epochs * dataset.steps_per_epoch(self.batch_size);
        match self.lr.kind {
            LrKind::Cosine => LrSchedule::cosine(self.lr.eta0, total_steps),
            LrKind::CosineConstantEnding => LrSchedule::cosine_constant_ending(
                self.lr.eta0,
                total_steps,
                self.lr.floor_fraction,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
version = 1
seed = 7
batch_size = 16

[dataset]
kind = "synthetic"
num_classes = 10
resolution = 16
train_samples = 64
test_samples = 32
noise_sigma = 0.8
seed = 3

[space]
input_channels = 1
num_classes = 10
resolution_choices = [16]

[space.stem]
out_channels = 4
kernel = 3
stride = 1

[space.head]
dropout = 0.0

[[space.stages]]
max_depth = 2
depth_choices = [1, 2]
max_width = 8
width_fraction_choices = [0.5, 1.0]
kernel_choices = [3, 5]
stride = 2

[plan]
strategy = "delayed-eps-shrink"
total_epochs = 4
fm_warmup_fraction = 0.5

[lr]
kind = "cosine"
eta0 = 0.1
"#;

    #[test]
    fn example_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, EXAMPLE).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.plan.k, 4);
        assert_eq!(cfg.plan.epsilon0, 1e-4);
        assert_eq!(cfg.plan.label_smoothing, 0.1);
        assert_eq!(cfg.eval.num_buckets, 6);
        let d = cfg.load_data().unwrap();
        assert_eq!(cfg.lr_schedule(&d).total_steps, 4 * 4);
    }

    #[test]
    fn bad_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, EXAMPLE.replace("version = 1", "version = 99")).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn strategy_conflicts_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            EXAMPLE.replace(
                "fm_warmup_fraction = 0.5",
                "fm_warmup_fraction = 0.5\ndistill = \"vanilla-kd-frozen-teacher\"",
            ),
        )
        .unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
