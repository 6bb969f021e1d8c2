//! Experiment configuration and its stable digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Arch, DenoiserConfig, DEFAULT_HIDDEN, DEFAULT_TIME_EMBED_DIM};
use crate::error::{Error, Result};
use crate::sampling::ConditionStrategy;
use crate::schedule::NoiseSchedule;
use crate::training::{TrainConfig, TrainMode};

/// Environment variable that replaces `out_dir` when set.
pub const OUT_DIR_ENV: &str = "NONCROSS_OUT_DIR";

pub const TOY_STEP_COUNTS: [usize; 4] = [2, 5, 10, 100];
pub const DISCRETE_STEP_COUNTS: [usize; 6] = [1000, 100, 50, 20, 10, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Equal-weight isotropic Gaussians at `(+center, 0)` and `(-center, 0)`.
    TwoGaussians { center: f64, sigma: f64 },
    /// `k` isotropic Gaussians evenly spaced on a circle.
    GaussianRing { k: usize, radius: f64, sigma: f64 },
    /// Two interleaved half circles with Gaussian jitter.
    Moons { noise: f64 },
}

impl DatasetSpec {
    pub fn two_gaussians() -> Self {
        DatasetSpec::TwoGaussians {
            center: 2.0,
            sigma: 0.2,
        }
    }

    pub fn gaussian_ring(k: usize) -> Self {
        DatasetSpec::GaussianRing {
            k,
            radius: 3.0,
            sigma: 0.2,
        }
    }

    /// Within-mode standard deviation.
    pub fn spread(&self) -> f64 {
        match *self {
            DatasetSpec::TwoGaussians { sigma, .. } | DatasetSpec::GaussianRing { sigma, .. } => sigma,
            DatasetSpec::Moons { noise } => noise,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            DatasetSpec::TwoGaussians { center, sigma } => center.is_finite() && sigma > 0.0,
            DatasetSpec::GaussianRing { k, radius, sigma } => k >= 1 && radius > 0.0 && sigma > 0.0,
            DatasetSpec::Moons { noise } => noise > 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("invalid dataset parameters {self:?}")));
        }
        Ok(())
    }
}

/// Distribution of the noise end of each flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    StandardNormal,
    Displaced { offset: Vec<f64>, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Linear {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    Cosine {
        steps: usize,
    },
    /// Continuous `t` in `[0, 1]` for velocity training; no discrete table.
    ToyContinuous,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Option<NoiseSchedule>> {
        match *self {
            ScheduleSpec::Linear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(steps, beta_start, beta_end).map(Some),
            ScheduleSpec::Cosine { steps } => NoiseSchedule::cosine(steps).map(Some),
            ScheduleSpec::ToyContinuous => Ok(None),
        }
    }

    pub fn steps(&self) -> Option<usize> {
        match *self {
            ScheduleSpec::Linear { steps, .. } | ScheduleSpec::Cosine { steps } => Some(steps),
            ScheduleSpec::ToyContinuous => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Architecture of the non-crossing model; the baseline is always
    /// unconditional.
    pub arch: Arch,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            arch: Arch::Concat,
            hidden_dims: DEFAULT_HIDDEN.to_vec(),
            time_embed_dim: DEFAULT_TIME_EMBED_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Inference strategies for the non-crossing model.
    pub strategies: Vec<ConditionStrategy>,
    pub step_counts: Vec<usize>,
    pub n_samples: usize,
    /// Chains per cell written out as full trajectories.
    pub export_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub source: SourceSpec,
    pub data_dim: usize,
    pub n_train: usize,
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sample: SampleSpec,
    /// Defaults to three within-mode standard deviations.
    pub ood_radius: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Velocity-trained two-Gaussian toy with the default sweep.
    pub fn toy(seed: u64) -> Self {
        let mut train = TrainConfig::new(TrainMode::ToyVelocity, true, seed);
        train.batch_size = 64;
        ExperimentConfig {
            dataset: DatasetSpec::two_gaussians(),
            source: SourceSpec::StandardNormal,
            data_dim: 2,
            n_train: 10_000,
            schedule: ScheduleSpec::ToyContinuous,
            model: ModelSpec::default(),
            train,
            sample: SampleSpec {
                strategies: vec![ConditionStrategy::PrevStepPred],
                step_counts: TOY_STEP_COUNTS.to_vec(),
                n_samples: 1000,
                export_trajectories: 64,
            },
            ood_radius: None,
            seed,
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Noise-prediction variant on a 1000-step linear schedule.
    pub fn discrete(seed: u64) -> Self {
        let mut cfg = ExperimentConfig::toy(seed);
        cfg.schedule = ScheduleSpec::Linear {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        cfg.train.mode = TrainMode::DdpmEps;
        cfg.sample.step_counts = DISCRETE_STEP_COUNTS.to_vec();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.data_dim != 2 {
            return Err(Error::Config(format!(
                "toy datasets are two-dimensional, got data_dim = {}",
                self.data_dim
            )));
        }
        if let SourceSpec::Displaced { offset, sigma } = &self.source {
            if offset.len() != self.data_dim || !(*sigma > 0.0) {
                return Err(Error::Config("displaced source needs a data_dim offset and positive sigma".into()));
            }
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        self.train.validate()?;
        if self.train.seed != self.seed {
            return Err(Error::Config(format!(
                "train.seed {} differs from seed {}",
                self.train.seed, self.seed
            )));
        }
        let continuous = self.schedule == ScheduleSpec::ToyContinuous;
        if continuous != (self.train.mode == TrainMode::ToyVelocity) {
            return Err(Error::Config(
                "toy_continuous schedule goes with toy_velocity training and vice versa".into(),
            ));
        }
        if !self.model.arch.is_conditional() {
            return Err(Error::Config("the non-crossing model needs a conditional arch".into()));
        }
        self.denoiser_config(self.model.arch).validate()?;
        let s = &self.sample;
        if s.n_samples == 0 || s.step_counts.is_empty() {
            return Err(Error::Config("n_samples and step_counts must be non-empty".into()));
        }
        let max_steps = self.schedule.steps().unwrap_or(usize::MAX);
        if let Some(&bad) = s.step_counts.iter().find(|&&n| n == 0 || n > max_steps) {
            return Err(Error::Config(format!("step count {bad} outside 1..={max_steps}")));
        }
        if let Some(r) = self.ood_radius {
            if !(r > 0.0) {
                return Err(Error::Config(format!("ood_radius must be positive, got {r}")));
            }
        }
        Ok(())
    }

    pub fn denoiser_config(&self, arch: Arch) -> DenoiserConfig {
        DenoiserConfig {
            arch,
            data_dim: self.data_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            time_embed_dim: self.model.time_embed_dim,
            zero_init_output: true,
        }
    }

    pub fn ood_radius(&self) -> f64 {
        self.ood_radius.unwrap_or(3.0 * self.dataset.spread())
    }

    /// Replaces every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Output directory after the environment override.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    /// Compact JSON with object keys sorted. `out_dir` is left out: where a
    /// run is written does not change what it computes.
    pub fn canonical_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out_dir");
        }
        Ok(serde_json::to_string(&sorted(value))?)
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with sorted keys.
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&sorted(serde_json::to_value(self)?))?)
    }
}

/// Rebuilds every object with its keys inserted in sorted order, whatever
/// map type serde_json was compiled with.
fn sorted(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}
