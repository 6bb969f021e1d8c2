//! Discrete noise schedules and the closed-form forward process.
//!
//! Steps are indexed `0..T` with `T - 1` the noisiest. A 1-based step `t` in
//! the usual DDPM notation corresponds to index `t - 1` here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest `alpha_bar` for which `x0` may be recovered from `x_t`.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the cumulative tables from raw betas and checks every invariant.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars.iter().any(|&a| a <= 0.0) {
            return Err(Error::Config(
                "alpha_bar must be positive and strictly decreasing".into(),
            ));
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Betas linearly spaced from `beta_start` to `beta_end`, both included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        NoiseSchedule::from_betas(betas)
    }

    /// Squared-cosine `alpha_bar` profile with betas clipped to 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        let f = |u: f64| {
            let c = ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
            c * c
        };
        let n = steps as f64;
        let betas = (0..steps)
            .map(|i| {
                let b = 1.0 - f((i + 1) as f64 / n) / f(i as f64 / n);
                b.clamp(f64::MIN_POSITIVE, MAX_BETA)
            })
            .collect();
        NoiseSchedule::from_betas(betas)
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::Index {
            index: t,
            len: self.len(),
        })
    }

    /// Time input for the denoiser: 1-based step over `T`, so the noisiest
    /// step maps to 1.
    pub fn normalized_time(&self, t: usize) -> f64 {
        (t + 1) as f64 / self.len() as f64
    }

    /// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
    pub fn q_sample(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Inverts [`NoiseSchedule::q_sample`] for `x0` given a noise estimate.
    pub fn predict_x0(&self, x_t: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        if ab < ALPHA_BAR_FLOOR {
            return Err(Error::NumericGuard(format!(
                "alpha_bar[{t}] = {ab:e} is too small to invert"
            )));
        }
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(eps_hat, |x, e| (x - n * e) / s)
    }
}
