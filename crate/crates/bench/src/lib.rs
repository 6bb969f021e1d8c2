//! Benchmark fixtures shared by the criterion targets.

use noncross::lab::experiment::{new_trainer, Role};
use noncross::training::Trainer;
use noncross::ExperimentConfig;

/// The default toy config with a short training run.
pub fn toy_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy(0);
    cfg.train.steps = 1;
    cfg
}

/// Freshly initialised trainer for `role` under [`toy_config`].
pub fn toy_trainer(role: Role) -> Trainer {
    new_trainer(&toy_config(), role).expect("default toy config is valid")
}
