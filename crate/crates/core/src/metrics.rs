//! Trajectory and sample-set metrics.
//!
//! IFC is the mean PSNR between every intermediate clean estimate of a
//! trajectory and its final sample; straighter flows score higher. PSNR is
//! capped at [`PSNR_CAP_DB`] so identical inputs give a finite value.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{euclidean, Tensor};
use crate::rng::{substream, Purpose};
use crate::sampling::{sample_batch, sample_batch_perturbed, ConditionStrategy, Perturbation, Trajectory};
use crate::schedule::NoiseSchedule;

pub const PSNR_CAP_DB: f64 = 100.0;
/// Mean squared errors below this count as identical inputs.
pub const MSE_FLOOR: f64 = 1e-12;
const MIN_DATA_RANGE: f64 = 1e-6;

/// Metrics for one (method, step count) cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub n_steps: usize,
    pub ifc: f64,
    pub ood_rate: f64,
    pub fidelity: f64,
    pub n_samples: usize,
    pub config_hash: String,
}

pub fn psnr(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    a.same_shape(b, "psnr")?;
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data_range must be positive, got {data_range}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Largest per-coordinate spread `max - min` of a reference set, floored at
/// `1e-6`.
pub fn data_range(reference: &[Tensor]) -> Result<f64> {
    let first = reference
        .first()
        .ok_or_else(|| Error::Contract("data_range of an empty set".into()))?;
    let d = first.numel();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for x in reference {
        x.same_shape(first, "reference set")?;
        for (k, &v) in x.data().iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let spread = lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max);
    Ok(spread.max(MIN_DATA_RANGE))
}

/// Inference flow consistency of one trajectory.
pub fn ifc(traj: &Trajectory, data_range: f64) -> Result<f64> {
    if traj.x0_preds.is_empty() {
        return Err(Error::Contract("IFC of an empty trajectory".into()));
    }
    let mut total = 0.0;
    for pred in &traj.x0_preds {
        total += psnr(pred, &traj.final_sample, data_range)?;
    }
    Ok(total / traj.x0_preds.len() as f64)
}

/// Mean IFC over a set of trajectories.
pub fn mean_ifc(trajs: &[Trajectory], data_range: f64) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Contract("IFC of an empty trajectory set".into()));
    }
    let mut total = 0.0;
    for t in trajs {
        total += ifc(t, data_range)?;
    }
    Ok(total / trajs.len() as f64)
}

/// Fraction of samples farther than `radius` from every mode.
pub fn ood_rate(samples: &[Tensor], modes: &[Tensor], radius: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("OOD rate of an empty sample set".into()));
    }
    if modes.is_empty() {
        return Err(Error::Config("OOD rate needs at least one mode".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("OOD radius must be positive, got {radius}")));
    }
    let mut outside = 0usize;
    for s in samples {
        let mut nearest = f64::INFINITY;
        for m in modes {
            nearest = nearest.min(s.distance(m)?);
        }
        if nearest > radius {
            outside += 1;
        }
    }
    Ok(outside as f64 / samples.len() as f64)
}

/// Monte Carlo mean of `||n1 - n2||^2` for standard normal pairs, next to
/// its expected value `2 * dim`.
pub fn noise_distance_check<R: Rng + ?Sized>(dim: usize, n_pairs: usize, rng: &mut R) -> Result<(f64, f64)> {
    if dim == 0 || n_pairs == 0 {
        return Err(Error::Config("dim and n_pairs must be positive".into()));
    }
    // Same draw order as two `Tensor::randn` calls per pair, without the
    // allocations.
    let mut a = vec![0.0; dim];
    let mut total = 0.0;
    for _ in 0..n_pairs {
        for v in a.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut sq = 0.0;
        for &x in &a {
            let y: f64 = rng.sample(StandardNormal);
            sq += (x - y) * (x - y);
        }
        total += sq;
    }
    Ok((total / n_pairs as f64, 2.0 * dim as f64))
}

/// `(eps + w * eps_p) / sqrt(1 + w^2)`.
pub fn perturb_noise(eps: &Tensor, eps_p: &Tensor, w: f64) -> Result<Tensor> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Config(format!("perturbation weight must be non-negative, got {w}")));
    }
    let norm = (1.0 + w * w).sqrt();
    eps.axpby(1.0 / norm, eps_p, w / norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub weight: f64,
    /// Mean `||final_perturbed - final_original||` over seeds.
    pub displacement: f64,
}

/// Settings for [`continuity_probe`] beyond the network and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub strategy: ConditionStrategy,
    pub n_steps: usize,
    pub t_inject: usize,
    pub weights: Vec<f64>,
    pub n_seeds: usize,
    pub seed: u64,
}

/// Paired DDIM samplings that differ only in the re-noising estimate at
/// `t_inject`, one pair per seed and weight. Initial noise and perturbation
/// directions are shared across weights.
pub fn continuity_probe(net: &Denoiser, sched: &NoiseSchedule, cfg: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    if cfg.weights.is_empty() {
        return Err(Error::Config("continuity probe needs at least one weight".into()));
    }
    if cfg.n_seeds == 0 {
        return Err(Error::Config("continuity probe needs at least one seed".into()));
    }
    let d = net.data_dim();
    let mut init_rng = substream(cfg.seed, Purpose::Probe, 0);
    let x_big_t = Tensor::randn(&[cfg.n_seeds, d], &mut init_rng);
    let mut dir_rng = substream(cfg.seed, Purpose::Probe, 1);
    let directions = Tensor::randn(&[cfg.n_seeds, d], &mut dir_rng);
    let base = sample_batch(net, sched, cfg.strategy, cfg.n_steps, &x_big_t)?;
    let mut rows = Vec::with_capacity(cfg.weights.len());
    for &weight in &cfg.weights {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::Config(format!("perturbation weight must be non-negative, got {weight}")));
        }
        let p = Perturbation {
            at_step: cfg.t_inject,
            weight,
            directions: directions.clone(),
        };
        let moved = sample_batch_perturbed(net, sched, cfg.strategy, cfg.n_steps, &x_big_t, Some(&p))?;
        rows.push(ProbeRow {
            weight,
            displacement: mean_final_distance(&base, &moved)?,
        });
    }
    Ok(rows)
}

/// Mean `||a_i.final - b_i.final||` over paired trajectories.
pub fn mean_final_distance(a: &[Trajectory], b: &[Trajectory]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "cannot pair {} trajectories with {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += x.final_sample.distance(&y.final_sample)?;
    }
    Ok(total / a.len() as f64)
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` between two
/// empirical distributions. All expectations average over every ordered
/// pair including `i = j`, so a set compared with a permutation of itself
/// scores zero up to rounding.
pub fn fidelity_proxy(samples: &[Tensor], reference: &[Tensor]) -> Result<f64> {
    if samples.is_empty() || reference.is_empty() {
        return Err(Error::Contract("fidelity of an empty set".into()));
    }
    let d = samples[0].numel();
    for x in samples.iter().chain(reference) {
        if x.numel() != d {
            return Err(Error::Dimension(format!(
                "fidelity sets mix widths {d} and {}",
                x.numel()
            )));
        }
    }
    let cross = mean_pair_distance(samples, reference);
    let within_s = mean_self_distance(samples);
    let within_r = mean_self_distance(reference);
    Ok((2.0 * cross - within_s - within_r).max(0.0))
}

fn mean_pair_distance(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += euclidean(x.data(), y.data());
        }
    }
    total / (a.len() * b.len()) as f64
}

fn mean_self_distance(a: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (i, x) in a.iter().enumerate() {
        for y in &a[i + 1..] {
            total += euclidean(x.data(), y.data());
        }
    }
    2.0 * total / (a.len() * a.len()) as f64
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension(format!(
            "spearman needs two equal-length series of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Standard normal draws as a list of rank-1 tensors.
pub fn gaussian_set(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..n).map(|_| Tensor::randn(&[dim], rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Arch, DenoiserConfig};
    use crate::rng::seeded;
    use crate::sampling::{sample_toy, StepTime};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    fn traj(preds: Vec<Tensor>, last: Tensor) -> Trajectory {
        let n = preds.len();
        Trajectory {
            step_times: (0..n).rev().map(StepTime::Discrete).collect(),
            states: preds.clone(),
            eps_hats: preds.clone(),
            x0_preds: preds,
            final_sample: last,
        }
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = v(&[0.3, -0.2]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_twenty_db() {
        // Every coordinate off by 0.2 gives MSE 0.04.
        let a = v(&[0.0, 0.5, -1.0, 0.25]);
        let b = a.map(|x| x + 0.2);
        let got = psnr(&a, &b, 2.0).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn psnr_rejects_bad_inputs() {
        assert!(matches!(psnr(&v(&[1.0]), &v(&[1.0, 2.0]), 1.0), Err(Error::Dimension(_))));
        assert!(psnr(&v(&[1.0]), &v(&[2.0]), 0.0).is_err());
    }

    #[test]
    fn ifc_cases() {
        let x = v(&[1.0, 2.0]);
        assert_eq!(ifc(&traj(vec![x.clone()], x.clone()), 1.0).unwrap(), PSNR_CAP_DB);
        // data_range 1: MSE 0.01 is 20 dB and MSE 1e-4 is 40 dB.
        let p20 = x.map(|a| a + 0.1);
        let p40 = x.map(|a| a + 0.01);
        let got = ifc(&traj(vec![p20, p40], x), 1.0).unwrap();
        assert!((got - 30.0).abs() < 1e-9);
        let empty = traj(vec![], v(&[0.0]));
        assert!(matches!(ifc(&empty, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn straight_flow_attains_the_cap() {
        let cfg = DenoiserConfig {
            hidden_dims: vec![4],
            time_embed_dim: 2,
            ..DenoiserConfig::new(Arch::Concat, 2)
        };
        let mut net = Denoiser::new(cfg, &mut seeded(0)).unwrap();
        let last = net.params().len() - 1;
        net.params_mut()[last] = v(&[0.75, -0.5]);
        let t = sample_toy(&net, ConditionStrategy::PrevStepPred, 10, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(ifc(&t, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn data_range_uses_widest_coordinate() {
        let set = [v(&[0.0, 1.0]), v(&[2.0, 1.5]), v(&[1.0, -3.0])];
        assert_eq!(data_range(&set).unwrap(), 4.5);
        assert_eq!(data_range(&[v(&[1.0])]).unwrap(), 1e-6);
    }

    #[test]
    fn ood_cases() {
        let modes = [v(&[2.0, 0.0]), v(&[-2.0, 0.0])];
        assert_eq!(ood_rate(&modes, &modes, 0.5).unwrap(), 0.0);
        assert_eq!(ood_rate(&[v(&[0.0, 0.0])], &[v(&[1.0, 0.0]), v(&[-1.0, 0.0])], 0.5).unwrap(), 1.0);
        assert!(ood_rate(&[], &modes, 0.5).is_err());

        let mut rng = seeded(1);
        let samples: Vec<Tensor> = (0..500).map(|_| Tensor::randn(&[2], &mut rng).scale(2.0)).collect();
        let mut count = 0;
        for s in &samples {
            let (x, y) = (s.data()[0], s.data()[1]);
            let da = ((x - 2.0).powi(2) + y * y).sqrt();
            let db = ((x + 2.0).powi(2) + y * y).sqrt();
            if da > 0.6 && db > 0.6 {
                count += 1;
            }
        }
        assert_eq!(ood_rate(&samples, &modes, 0.6).unwrap(), count as f64 / 500.0);
    }

    #[test]
    fn noise_distance_matches_identity() {
        let (mean, expected) = noise_distance_check(2, 100_000, &mut seeded(2)).unwrap();
        assert_eq!(expected, 4.0);
        // ||n1 - n2||^2 is 2 * chi2(dim), variance 8 * dim.
        let se = (8.0 * 2.0 / 100_000.0f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "{mean}");
        assert_eq!(noise_distance_check(1, 1, &mut seeded(0)).unwrap().1, 2.0);
    }

    #[test]
    fn perturb_limits() {
        let mut rng = seeded(3);
        let e = Tensor::randn(&[5], &mut rng);
        let p = Tensor::randn(&[5], &mut rng);
        assert_eq!(perturb_noise(&e, &p, 0.0).unwrap(), e);
        let big = perturb_noise(&e, &p, 1e6).unwrap();
        for (a, b) in big.data().iter().zip(p.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        assert!(perturb_noise(&e, &p, -0.1).is_err());
        assert!(matches!(perturb_noise(&e, &v(&[1.0]), 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn perturbed_noise_keeps_unit_variance() {
        let mut rng = seeded(4);
        let n = 100_000;
        for w in [0.01, 0.05, 0.1, 0.2, 0.5] {
            let e = Tensor::randn(&[n], &mut rng);
            let p = Tensor::randn(&[n], &mut rng);
            let mixed = perturb_noise(&e, &p, w).unwrap();
            let mean = mixed.sum() / n as f64;
            let var = mixed.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Sample variance of unit normals has standard error sqrt(2 / n).
            assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt(), "w={w} var={var}");
        }
    }

    fn brute_energy(a: &[Tensor], b: &[Tensor]) -> f64 {
        let mean = |x: &[Tensor], y: &[Tensor]| {
            let mut s = 0.0;
            for p in x {
                for q in y {
                    s += p.distance(q).unwrap();
                }
            }
            s / (x.len() * y.len()) as f64
        };
        2.0 * mean(a, b) - mean(a, a) - mean(b, b)
    }

    #[test]
    fn energy_distance_identical_multiset() {
        let mut rng = seeded(5);
        let a = gaussian_set(300, 2, &mut rng);
        let mut b = a.clone();
        b.reverse();
        assert!(fidelity_proxy(&a, &b).unwrap() < 1e-6);
    }

    #[test]
    fn energy_distance_separates() {
        let mut rng = seeded(6);
        let shift = |s: Vec<Tensor>, dx: f64| -> Vec<Tensor> {
            s.into_iter().map(|t| t.add(&v(&[dx, 0.0])).unwrap()).collect()
        };
        let a1 = gaussian_set(400, 2, &mut rng);
        let a2 = gaussian_set(400, 2, &mut rng);
        let b = shift(gaussian_set(400, 2, &mut rng), 4.0);
        let same = fidelity_proxy(&a1, &a2).unwrap();
        let apart = fidelity_proxy(&a1, &b).unwrap();
        assert!(apart > same && apart > 1.0, "{same} {apart}");
    }

    #[test]
    fn energy_distance_matches_double_loop() {
        let mut rng = seeded(7);
        let a = gaussian_set(10_000, 2, &mut rng);
        let b: Vec<Tensor> = gaussian_set(10_000, 2, &mut rng)
            .into_iter()
            .map(|t| t.add(&v(&[4.0, 0.0])).unwrap())
            .collect();
        let got = fidelity_proxy(&a, &b).unwrap();
        let want = brute_energy(&a, &b);
        assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
    }

    #[test]
    fn spearman_values() {
        let w = [0.01, 0.05, 0.1, 0.2, 0.5];
        assert_eq!(spearman(&w, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&w, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        assert_eq!(spearman(&w, &[1.0; 5]).unwrap(), None);
        assert!(spearman(&w, &[1.0]).is_err());
        // Ties share the average rank: ranks [1, 2.5, 2.5, 4].
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]).unwrap().unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn probe_zero_weight_is_exactly_zero() {
        let cfg = DenoiserConfig {
            hidden_dims: vec![8],
            time_embed_dim: 4,
            zero_init_output: false,
            ..DenoiserConfig::new(Arch::Concat, 2)
        };
        let net = Denoiser::new(cfg, &mut seeded(8)).unwrap();
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let rows = continuity_probe(
            &net,
            &sched,
            &ProbeConfig {
                strategy: ConditionStrategy::PrevStepPred,
                n_steps: 50,
                t_inject: 30,
                weights: vec![0.0, 0.1, 0.5],
                n_seeds: 20,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(rows[0].displacement, 0.0);
        assert!(rows[1].displacement > 0.0);
        assert!(rows[2].displacement > rows[1].displacement);
    }

    #[test]
    fn final_step_injection_is_bounded_by_step_algebra() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = seeded(10);
        let x = Tensor::randn(&[3], &mut rng);
        let e = Tensor::randn(&[3], &mut rng);
        let p = Tensor::randn(&[3], &mut rng);
        let (t, t_prev) = (1, 0);
        let tilde = perturb_noise(&e, &p, 0.05).unwrap();
        let x0 = sched.predict_x0(&x, &e, t).unwrap();
        let clean = sched.q_sample(&x0, &e, t_prev).unwrap();
        let moved = sched.q_sample(&x0, &tilde, t_prev).unwrap();
        let bound = (1.0 - sched.alpha_bar(t_prev).unwrap()).sqrt() * tilde.distance(&e).unwrap();
        assert!(clean.distance(&moved).unwrap() <= bound * (1.0 + 1e-12));
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
            let (a, b) = (v(&a), v(&b));
            prop_assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
        }

        #[test]
        fn ood_rate_monotone_in_radius(seed in 0u64..1000, r in 0.05f64..3.0, extra in 0.0f64..2.0) {
            let mut rng = seeded(seed);
            let samples = gaussian_set(50, 2, &mut rng);
            let modes = [v(&[1.0, 0.0]), v(&[-1.0, 0.0])];
            prop_assert!(ood_rate(&samples, &modes, r + extra).unwrap() <= ood_rate(&samples, &modes, r).unwrap());
        }

        #[test]
        fn ifc_ignores_step_order(seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let preds = gaussian_set(6, 3, &mut rng);
            let last = Tensor::randn(&[3], &mut rng);
            let mut rev = preds.clone();
            rev.reverse();
            let a = ifc(&traj(preds, last.clone()), 3.0).unwrap();
            let b = ifc(&traj(rev, last), 3.0).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
