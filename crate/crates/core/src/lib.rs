//! Non-crossing conditioned diffusion on toy data.
//!
//! A denoiser that is additionally conditioned on its own noise (or
//! velocity) estimate, trained with a bootstrap that feeds it either a zero
//! condition or a stop-gradient first-pass prediction. Sampling carries the
//! previous step's estimate forward as the condition. The crate ships the
//! baseline trainers, a deterministic DDIM sampler, Euler integration for
//! rectified-flow style toys, and the inference-flow consistency metric.

pub mod denoiser;
pub mod error;
pub mod lab;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use denoiser::{time_embedding, Arch, Denoiser, DenoiserConfig};
pub use error::{Error, Result};
pub use lab::{ExperimentConfig, OUT_DIR_ENV};
pub use metrics::{fidelity_proxy, ifc, ood_rate, psnr, MetricReport};
pub use numerics::{Adam, AdamConfig, Gradients, Tape, Tensor, Var};
pub use sampling::{ddim_step, sample, sample_toy, ConditionStrategy, Trajectory};
pub use schedule::NoiseSchedule;
