//! Trainers: baseline noise prediction, the bootstrap non-crossing objective,
//! and the straight-interpolation velocity objective used on toy data.
//!
//! Bootstrap rule, per example: draw `u ~ U(0, 1)`. If `u <= bootstrap_p`
//! the condition is zero (case 1). Otherwise the network is first evaluated
//! with a zero condition and that output, detached from the graph, becomes
//! the condition (case 2).
//!
//! Objectives are pure functions of explicit draws ([`EpsBatch`],
//! [`VelocityBatch`]) so the stop-gradient contract can be checked against
//! an independent computation. [`Trainer`] owns the draws, the optimizer and
//! the step counter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Arch, Denoiser};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::rng::{substream, Purpose};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    DdpmEps,
    ToyVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub bootstrap_p: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: TrainMode,
    pub conditioned: bool,
    pub seed: u64,
    /// Cosine decay of the learning rate to zero over `steps`.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, conditioned: bool, seed: u64) -> Self {
        TrainConfig {
            bootstrap_p: 0.5,
            steps: 20_000,
            batch_size: 128,
            lr: 1e-3,
            mode,
            conditioned,
            seed,
            cosine_decay: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bootstrap_p) {
            return Err(Error::Config(format!(
                "bootstrap_p {} outside [0, 1]",
                self.bootstrap_p
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// A draw from the product of target and source distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowPair {
    /// Target-distribution point.
    pub x0: Tensor,
    /// Source (noise) point.
    pub x1: Tensor,
}

impl FlowPair {
    pub fn new(x0: Tensor, x1: Tensor) -> Result<Self> {
        x0.same_shape(&x1, "flow pair")?;
        Ok(FlowPair { x0, x1 })
    }

    /// Straight interpolation `t * x1 + (1 - t) * x0`.
    pub fn interpolate(&self, t: f64) -> Tensor {
        self.x1
            .axpby(t, &self.x0, 1.0 - t)
            .expect("pair shapes checked at construction")
    }

    /// Velocity target `x1 - x0`.
    pub fn velocity(&self) -> Tensor {
        self.x1.sub(&self.x0).expect("pair shapes checked at construction")
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub case1_fraction: f64,
}

/// Explicit draws for a noise-prediction batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsBatch {
    /// `[B, d]` clean points.
    pub x0: Tensor,
    pub t: Vec<usize>,
    /// `[B, d]` noise.
    pub eps: Tensor,
    /// Case 1 flags: `true` means the condition is zero.
    pub zero_condition: Vec<bool>,
}

/// Explicit draws for a velocity batch.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    pub zero_condition: Vec<bool>,
}

/// Loss value, parameter gradients and the fraction of case-1 rows.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub case1_fraction: f64,
}

/// `x_t` for every row of an [`EpsBatch`].
pub fn noised_batch(sched: &NoiseSchedule, batch: &EpsBatch) -> Result<Tensor> {
    let (rows, d) = batch.x0.dims2("x0 batch")?;
    batch.x0.same_shape(&batch.eps, "noise batch")?;
    if batch.t.len() != rows || batch.zero_condition.len() != rows {
        return Err(Error::Dimension("per-row draws disagree with batch size".into()));
    }
    let mut out = Vec::with_capacity(rows * d);
    for (i, &t) in batch.t.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        out.extend(
            batch.x0.row(i)
                .iter()
                .zip(batch.eps.row(i))
                .map(|(x, e)| s * x + n * e),
        );
    }
    Tensor::matrix(rows, d, out)
}

/// First-pass predictions with a zero condition for case-2 rows; zero rows
/// elsewhere. Evaluated without a tape, so no gradient can reach them.
pub fn bootstrap_conditions(
    net: &Denoiser,
    x_t: &Tensor,
    t_norm: &[f64],
    zero_condition: &[bool],
) -> Result<Tensor> {
    let (rows, d) = x_t.dims2("bootstrap input")?;
    let mut cond = Tensor::zeros(&[rows, d]);
    let picked: Vec<usize> = (0..rows).filter(|&i| !zero_condition[i]).collect();
    if picked.is_empty() {
        return Ok(cond);
    }
    let sub = Tensor::stack_rows(&picked.iter().map(|&i| x_t.row_tensor(i)).collect::<Vec<_>>())?;
    let times: Vec<f64> = picked.iter().map(|&i| t_norm[i]).collect();
    let pred = net.forward_batch(&sub, &Tensor::zeros(sub.shape()), &times)?;
    let data = cond.data_mut();
    for (k, &i) in picked.iter().enumerate() {
        data[i * d..(i + 1) * d].copy_from_slice(pred.row(k));
    }
    Ok(cond)
}

/// Mean over the batch of `||target - f(x, cond, t)||^2` and its gradient.
pub fn regression_objective(
    net: &Denoiser,
    x: &Tensor,
    cond: &Tensor,
    t_norm: &[f64],
    target: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let rows = x.rows();
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let cv = tape.constant(cond.clone());
    let tv = tape.constant(net.embed_times(t_norm)?);
    let target_v = tape.constant(target.clone());
    let out = net.record(&mut tape, &vars, xv, cv, tv)?;
    let loss = tape.squared_error(out, target_v, 1.0 / rows as f64)?;
    let grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).data()[0];
    let grads = vars
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    Ok((loss_value, grads))
}

fn case1_fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&z| z).count() as f64 / flags.len() as f64
}

/// Noise-prediction objective with the bootstrap condition. With every
/// `zero_condition` flag set this is plain noise regression with a zero
/// condition.
pub fn eps_objective(net: &Denoiser, sched: &NoiseSchedule, batch: &EpsBatch) -> Result<Objective> {
    let x_t = noised_batch(sched, batch)?;
    let t_norm: Vec<f64> = batch.t.iter().map(|&t| sched.normalized_time(t)).collect();
    let cond = bootstrap_conditions(net, &x_t, &t_norm, &batch.zero_condition)?;
    let (loss, grads) = regression_objective(net, &x_t, &cond, &t_norm, &batch.eps)?;
    Ok(Objective {
        loss,
        grads,
        case1_fraction: case1_fraction(&batch.zero_condition),
    })
}

/// Velocity objective on straight interpolations, optionally with the
/// bootstrap condition.
pub fn velocity_objective(net: &Denoiser, batch: &VelocityBatch) -> Result<Objective> {
    let (rows, _) = batch.x0.dims2("x0 batch")?;
    batch.x0.same_shape(&batch.x1, "x1 batch")?;
    if batch.t.len() != rows || batch.zero_condition.len() != rows {
        return Err(Error::Dimension("per-row draws disagree with batch size".into()));
    }
    let mut x_t = batch.x0.clone();
    let d = batch.x0.cols();
    for (i, &t) in batch.t.iter().enumerate() {
        for (k, v) in x_t.data_mut()[i * d..(i + 1) * d].iter_mut().enumerate() {
            *v = t * batch.x1.row(i)[k] + (1.0 - t) * *v;
        }
    }
    let target = batch.x1.sub(&batch.x0)?;
    let cond = bootstrap_conditions(net, &x_t, &batch.t, &batch.zero_condition)?;
    let (loss, grads) = regression_objective(net, &x_t, &cond, &batch.t, &target)?;
    Ok(Objective {
        loss,
        grads,
        case1_fraction: case1_fraction(&batch.zero_condition),
    })
}

/// Two flows that pass through the same state `z` at step `t`.
///
/// Noise vectors are fixed at `+1` and `-0.5` in every coordinate; see
/// [`make_crossing_pair_with`] to choose them.
pub fn make_crossing_pair(z: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(FlowPair, FlowPair)> {
    let eps_a = Tensor::full(z.shape(), 1.0);
    let eps_b = Tensor::full(z.shape(), -0.5);
    make_crossing_pair_with(z, t, sched, &eps_a, &eps_b)
}

pub fn make_crossing_pair_with(
    z: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    eps_a: &Tensor,
    eps_b: &Tensor,
) -> Result<(FlowPair, FlowPair)> {
    if eps_a == eps_b {
        return Err(Error::Contract("crossing flows need distinct noise".into()));
    }
    let a = FlowPair::new(sched.predict_x0(z, eps_a, t)?, eps_a.clone())?;
    let b = FlowPair::new(sched.predict_x0(z, eps_b, t)?, eps_b.clone())?;
    Ok((a, b))
}

/// Owns a network, its optimizer and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub net: Denoiser,
    pub optimizer: Adam,
    pub config: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(net: Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.conditioned != net.arch().is_conditional() {
            return Err(Error::Config(format!(
                "conditioned = {} does not match architecture {:?}",
                config.conditioned,
                net.arch()
            )));
        }
        let optimizer = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            net.params(),
        );
        Ok(Trainer {
            net,
            optimizer,
            config,
            step: 0,
        })
    }

    /// Resumes from saved state.
    pub fn from_parts(net: Denoiser, optimizer: Adam, config: TrainConfig, step: u64) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            net,
            optimizer,
            config,
            step,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn noise_rng(&self) -> ChaCha8Rng {
        substream(self.config.seed, Purpose::Noise, self.step)
    }

    fn coins(&self, rows: usize, always_zero: bool) -> Vec<bool> {
        if always_zero {
            return vec![true; rows];
        }
        let mut rng = substream(self.config.seed, Purpose::Bootstrap, self.step);
        let p = self.config.bootstrap_p;
        (0..rows).map(|_| rng.random::<f64>() <= p).collect()
    }

    /// Draws `t`, noise and bootstrap flags for this step.
    pub fn draw_eps_batch(&self, sched: &NoiseSchedule, x0: &Tensor, always_zero: bool) -> Result<EpsBatch> {
        let (rows, d) = x0.dims2("x0 batch")?;
        let mut rng = self.noise_rng();
        let t = (0..rows).map(|_| rng.random_range(0..sched.len())).collect();
        let eps = Tensor::randn(&[rows, d], &mut rng);
        Ok(EpsBatch {
            x0: x0.clone(),
            t,
            eps,
            zero_condition: self.coins(rows, always_zero),
        })
    }

    /// Draws `t ~ U[0, 1)` and bootstrap flags for this step.
    pub fn draw_velocity_batch(&self, x0: &Tensor, x1: &Tensor, always_zero: bool) -> Result<VelocityBatch> {
        let (rows, _) = x0.dims2("x0 batch")?;
        let mut rng = self.noise_rng();
        let t = (0..rows).map(|_| rng.random::<f64>()).collect();
        Ok(VelocityBatch {
            x0: x0.clone(),
            x1: x1.clone(),
            t,
            zero_condition: self.coins(rows, always_zero),
        })
    }

    fn require_mode(&self, mode: TrainMode) -> Result<()> {
        if self.config.mode != mode {
            return Err(Error::Contract(format!(
                "trainer is configured for {:?}, not {mode:?}",
                self.config.mode
            )));
        }
        Ok(())
    }

    /// One bootstrap non-crossing step on a `[B, d]` batch of clean points.
    pub fn train_step_noncross(&mut self, sched: &NoiseSchedule, x0: &Tensor) -> Result<StepStats> {
        self.require_mode(TrainMode::DdpmEps)?;
        if !self.net.arch().is_conditional() {
            return Err(Error::Contract(
                "non-crossing training needs a conditional architecture".into(),
            ));
        }
        let batch = self.draw_eps_batch(sched, x0, false)?;
        let obj = eps_objective(&self.net, sched, &batch)?;
        self.apply(obj)
    }

    /// Conditional network trained with the condition fixed at zero.
    pub fn train_step_zero_condition(&mut self, sched: &NoiseSchedule, x0: &Tensor) -> Result<StepStats> {
        self.require_mode(TrainMode::DdpmEps)?;
        let batch = self.draw_eps_batch(sched, x0, true)?;
        let obj = eps_objective(&self.net, sched, &batch)?;
        self.apply(obj)
    }

    /// Plain noise regression on an unconditional network.
    pub fn train_step_ddpm_baseline(&mut self, sched: &NoiseSchedule, x0: &Tensor) -> Result<StepStats> {
        self.require_mode(TrainMode::DdpmEps)?;
        if self.net.arch() != Arch::Unconditional {
            return Err(Error::Contract("baseline training needs an unconditional network".into()));
        }
        let batch = self.draw_eps_batch(sched, x0, true)?;
        let obj = eps_objective(&self.net, sched, &batch)?;
        self.apply(obj)
    }

    /// One velocity step on a batch of flow pairs.
    pub fn train_step_toy(&mut self, pairs: &[FlowPair]) -> Result<StepStats> {
        self.require_mode(TrainMode::ToyVelocity)?;
        let x0 = Tensor::stack_rows(&pairs.iter().map(|p| p.x0.clone()).collect::<Vec<_>>())?;
        let x1 = Tensor::stack_rows(&pairs.iter().map(|p| p.x1.clone()).collect::<Vec<_>>())?;
        let batch = self.draw_velocity_batch(&x0, &x1, !self.config.conditioned)?;
        let obj = velocity_objective(&self.net, &batch)?;
        self.apply(obj)
    }

    /// Dispatches one step on the matching objective for the configured mode
    /// and architecture. `pairs` supplies the batch; for noise prediction
    /// only `x0` is used.
    pub fn train_step(&mut self, sched: Option<&NoiseSchedule>, pairs: &[FlowPair]) -> Result<StepStats> {
        match self.config.mode {
            TrainMode::ToyVelocity => self.train_step_toy(pairs),
            TrainMode::DdpmEps => {
                let sched = sched.ok_or_else(|| {
                    Error::Config("noise-prediction training needs a discrete schedule".into())
                })?;
                let x0 = Tensor::stack_rows(&pairs.iter().map(|p| p.x0.clone()).collect::<Vec<_>>())?;
                if self.net.arch().is_conditional() {
                    self.train_step_noncross(sched, &x0)
                } else {
                    self.train_step_ddpm_baseline(sched, &x0)
                }
            }
        }
    }

    /// Samples a minibatch of pairs (with replacement) for the current step.
    pub fn minibatch<'a>(&self, data: &'a [FlowPair]) -> Result<Vec<FlowPair>> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mut rng = substream(self.config.seed, Purpose::Batch, self.step);
        Ok((0..self.config.batch_size)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect())
    }

    /// Runs the remaining configured steps over `data`, reporting each step.
    pub fn fit(
        &mut self,
        sched: Option<&NoiseSchedule>,
        data: &[FlowPair],
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<()> {
        while self.step < self.config.steps {
            let batch = self.minibatch(data)?;
            let stats = self.train_step(sched, &batch)?;
            on_step(&stats);
        }
        Ok(())
    }

    fn apply(&mut self, obj: Objective) -> Result<StepStats> {
        if !obj.loss.is_finite() || obj.grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                step: self.step,
                loss: obj.loss,
            });
        }
        if self.config.cosine_decay {
            let frac = self.step as f64 / self.config.steps as f64;
            let lr = 0.5 * self.config.lr * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos());
            self.optimizer.set_lr(lr);
        }
        self.optimizer.step(self.net.params_mut(), &obj.grads)?;
        let stats = StepStats {
            step: self.step,
            loss: obj.loss,
            case1_fraction: obj.case1_fraction,
        };
        self.step += 1;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::rng::seeded;

    fn small(arch: Arch, d: usize, hidden: usize, zero_out: bool, seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            hidden_dims: vec![hidden; 2],
            time_embed_dim: 4,
            zero_init_output: zero_out,
            ..DenoiserConfig::new(arch, d)
        };
        Denoiser::new(cfg, &mut seeded(seed)).unwrap()
    }

    fn eps_cfg(conditioned: bool) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            steps: 100,
            ..TrainConfig::new(TrainMode::DdpmEps, conditioned, 42)
        }
    }

    #[test]
    fn config_validation() {
        let mut c = eps_cfg(true);
        assert!(c.validate().is_ok());
        c.bootstrap_p = 1.5;
        assert!(c.validate().is_err());
        let mut c = eps_cfg(true);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn noncross_rejects_unconditional_net() {
        let net = small(Arch::Unconditional, 2, 8, true, 1);
        let mut cfg = eps_cfg(false);
        cfg.conditioned = false;
        let mut tr = Trainer::new(net, cfg).unwrap();
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::zeros(&[4, 2]);
        assert!(matches!(tr.train_step_noncross(&sched, &x0), Err(Error::Contract(_))));
    }

    #[test]
    fn interpolation_endpoints() {
        let p = FlowPair::new(
            Tensor::vector(vec![1.0, 2.0]).unwrap(),
            Tensor::vector(vec![-3.0, 0.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(p.interpolate(0.0), p.x0);
        let near_one = p.interpolate(1.0 - 1e-12);
        assert!(near_one.max_abs_diff(&p.x1).unwrap() < 1e-11);
        assert_eq!(p.velocity().data(), &[-4.0, -1.5]);
    }

    #[test]
    fn crossing_pairs_meet_at_z() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let z = Tensor::vector(vec![0.4, -1.1, 2.0]).unwrap();
        let (a, b) = make_crossing_pair(&z, 30, &sched).unwrap();
        assert_ne!(a.x1, b.x1);
        for pair in [&a, &b] {
            let x = sched.q_sample(&pair.x0, &pair.x1, 30).unwrap();
            assert!(x.max_abs_diff(&z).unwrap() < 1e-10);
        }
        let same = Tensor::full(&[3], 0.3);
        assert!(make_crossing_pair_with(&z, 30, &sched, &same, &same).is_err());
    }

    #[test]
    fn baseline_loss_at_init_is_data_dim() {
        // Zero output layer: the loss is E||eps||^2 = d.
        let d = 3;
        let net = small(Arch::Unconditional, d, 8, true, 3);
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = seeded(12);
        let n = 10_000;
        let x0 = Tensor::randn(&[n, d], &mut rng);
        let batch = EpsBatch {
            t: (0..n).map(|_| rng.random_range(0..100)).collect(),
            eps: Tensor::randn(&[n, d], &mut rng),
            x0,
            zero_condition: vec![true; n],
        };
        let obj = eps_objective(&net, &sched, &batch).unwrap();
        assert!((obj.loss - d as f64).abs() < 0.1 * d as f64, "loss {}", obj.loss);
    }

    #[test]
    fn baseline_overfits_a_single_example() {
        let net = small(Arch::Unconditional, 2, 16, true, 4);
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let batch = EpsBatch {
            x0: Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap(),
            t: vec![6],
            eps: Tensor::matrix(1, 2, vec![0.8, 1.3]).unwrap(),
            zero_condition: vec![true],
        };
        let mut net = net;
        let cfg = AdamConfig { lr: 1e-4, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, net.params());
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let obj = eps_objective(&net, &sched, &batch).unwrap();
            assert!(obj.loss < last, "loss went from {last} to {}", obj.loss);
            last = obj.loss;
            adam.step(net.params_mut(), &obj.grads).unwrap();
        }
    }

    #[test]
    fn fixed_seed_repeats_loss_sequence() {
        let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let run = || {
            let net = small(Arch::Concat, 2, 8, true, 5);
            let mut tr = Trainer::new(net, eps_cfg(true)).unwrap();
            let mut rng = seeded(99);
            let data: Vec<FlowPair> = (0..64)
                .map(|_| FlowPair::new(Tensor::randn(&[2], &mut rng), Tensor::zeros(&[2])).unwrap())
                .collect();
            let mut losses = Vec::new();
            tr.fit(Some(&sched), &data, |s| losses.push(s.loss)).unwrap();
            losses
        };
        let a = run();
        assert_eq!(a.len(), 100);
        assert_eq!(a, run());
    }

    #[test]
    fn bootstrap_p_one_is_zero_condition_training() {
        let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let mut rng = seeded(7);
        let x0 = Tensor::randn(&[16, 2], &mut rng);
        let net = small(Arch::Concat, 2, 8, true, 8);
        let mut cfg = eps_cfg(true);
        cfg.bootstrap_p = 1.0;
        let mut a = Trainer::new(net.clone(), cfg.clone()).unwrap();
        let mut b = Trainer::new(net, cfg).unwrap();
        for _ in 0..30 {
            let sa = a.train_step_noncross(&sched, &x0).unwrap();
            let sb = b.train_step_zero_condition(&sched, &x0).unwrap();
            assert_eq!(sa.loss.to_bits(), sb.loss.to_bits());
            assert_eq!(sa.case1_fraction, 1.0);
        }
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn bootstrap_rate_tracks_p() {
        let net = small(Arch::Concat, 2, 8, true, 8);
        let mut cfg = eps_cfg(true);
        cfg.batch_size = 4000;
        let tr = Trainer::new(net, cfg).unwrap();
        let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let b = tr.draw_eps_batch(&sched, &Tensor::zeros(&[4000, 2]), false).unwrap();
        let frac = b.zero_condition.iter().filter(|&&z| z).count() as f64 / 4000.0;
        assert!((frac - 0.5).abs() < 0.04);
    }

    #[test]
    fn velocity_zero_target_is_learned() {
        let p = FlowPair::new(
            Tensor::vector(vec![0.7, -0.2]).unwrap(),
            Tensor::vector(vec![0.7, -0.2]).unwrap(),
        )
        .unwrap();
        let net = small(Arch::Unconditional, 2, 16, false, 9);
        let cfg = TrainConfig {
            batch_size: 8,
            steps: 2000,
            ..TrainConfig::new(TrainMode::ToyVelocity, false, 3)
        };
        let mut tr = Trainer::new(net, cfg).unwrap();
        let data = vec![p];
        let mut last = 0.0;
        tr.fit(None, &data, |s| last = s.loss).unwrap();
        assert!(last < 1e-4, "final loss {last}");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let net = small(Arch::Unconditional, 1, 4, true, 1);
        let mut tr = Trainer::new(net, TrainConfig::new(TrainMode::ToyVelocity, false, 0)).unwrap();
        let obj = Objective {
            loss: f64::NAN,
            grads: tr.net.params().to_vec(),
            case1_fraction: 1.0,
        };
        assert!(matches!(tr.apply(obj), Err(Error::Diverged { step: 0, .. })));
    }
}
