//! Toy target distributions and their pairing with source noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{DatasetSpec, ExperimentConfig, SourceSpec};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::rng::{substream, Purpose};
use crate::training::FlowPair;

/// Points along each moon arc used as "modes" for OOD counting.
const MOON_ARC_POINTS: usize = 200;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// One draw from the target mixture.
pub fn sample_target<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Tensor {
    let (x, y) = match *spec {
        DatasetSpec::TwoGaussians { center, sigma } => {
            let c = if rng.random::<bool>() { center } else { -center };
            (c + sigma * normal(rng), sigma * normal(rng))
        }
        DatasetSpec::GaussianRing { k, radius, sigma } => {
            let j = rng.random_range(0..k);
            let a = 2.0 * PI * j as f64 / k as f64;
            (radius * a.cos() + sigma * normal(rng), radius * a.sin() + sigma * normal(rng))
        }
        DatasetSpec::Moons { noise } => {
            let theta = PI * rng.random::<f64>();
            let (x, y) = if rng.random::<bool>() {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            (x + noise * normal(rng), y + noise * normal(rng))
        }
    };
    Tensor::from_parts(vec![2], vec![x, y])
}

pub fn sample_source<R: Rng + ?Sized>(spec: &SourceSpec, dim: usize, rng: &mut R) -> Tensor {
    match spec {
        SourceSpec::StandardNormal => Tensor::randn(&[dim], rng),
        SourceSpec::Displaced { offset, sigma } => {
            let data = offset.iter().map(|o| o + sigma * normal(rng)).collect();
            Tensor::from_parts(vec![dim], data)
        }
    }
}

/// Mode centres of the target. For moons, evenly spaced points on both
/// arcs.
pub fn modes(spec: &DatasetSpec) -> Vec<Tensor> {
    let point = |x: f64, y: f64| Tensor::from_parts(vec![2], vec![x, y]);
    match *spec {
        DatasetSpec::TwoGaussians { center, .. } => vec![point(center, 0.0), point(-center, 0.0)],
        DatasetSpec::GaussianRing { k, radius, .. } => (0..k)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / k as f64;
                point(radius * a.cos(), radius * a.sin())
            })
            .collect(),
        DatasetSpec::Moons { .. } => (0..MOON_ARC_POINTS)
            .flat_map(|i| {
                let theta = PI * i as f64 / (MOON_ARC_POINTS - 1) as f64;
                [
                    point(theta.cos(), theta.sin()),
                    point(1.0 - theta.cos(), 0.5 - theta.sin()),
                ]
            })
            .collect(),
    }
}

/// Independent (target, source) pairs for training.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Vec<FlowPair>> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, Purpose::Dataset, 0);
    Ok((0..cfg.n_train)
        .map(|_| {
            let x0 = sample_target(&cfg.dataset, &mut rng);
            let x1 = sample_source(&cfg.source, cfg.data_dim, &mut rng);
            FlowPair { x0, x1 }
        })
        .collect())
}

/// Fresh target draws for distribution comparisons, independent of the
/// training set.
pub fn reference_set(cfg: &ExperimentConfig, n: usize) -> Vec<Tensor> {
    let mut rng = substream(cfg.seed, Purpose::Reference, 0);
    (0..n).map(|_| sample_target(&cfg.dataset, &mut rng)).collect()
}

/// `[n, d]` initial states for sampling, shared by every method.
pub fn initial_noise(cfg: &ExperimentConfig, n: usize) -> Tensor {
    let mut rng = substream(cfg.seed, Purpose::Sampling, 0);
    let rows: Vec<Tensor> = (0..n).map(|_| sample_source(&cfg.source, cfg.data_dim, &mut rng)).collect();
    Tensor::stack_rows(&rows).expect("rows share one width")
}
