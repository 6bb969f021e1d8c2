//! Deterministic samplers that record full trajectories.
//!
//! [`sample`] runs DDIM with `eta = 0` on a uniform descending grid.
//! [`sample_toy`] integrates a velocity field from `t = 1` (source) to
//! `t = 0` (target) with Euler steps. Both feed the network a zero condition
//! at the first step; later conditions follow the [`ConditionStrategy`].
//!
//! Batched variants run many independent chains as rows of one matrix. Rows
//! never interact, so a chain's trajectory does not depend on the batch it
//! was sampled in.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionStrategy {
    /// Always a zero condition.
    Zero,
    /// The initial noise of the chain.
    GroundtruthEps,
    /// The previous step's estimate.
    PrevStepPred,
    /// Two passes per step: zero condition first, then its output.
    CurrentStepPred,
}

impl ConditionStrategy {
    pub const ALL: [ConditionStrategy; 4] = [
        ConditionStrategy::Zero,
        ConditionStrategy::GroundtruthEps,
        ConditionStrategy::PrevStepPred,
        ConditionStrategy::CurrentStepPred,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditionStrategy::Zero => "zero",
            ConditionStrategy::GroundtruthEps => "groundtruth_eps",
            ConditionStrategy::PrevStepPred => "prev_step_pred",
            ConditionStrategy::CurrentStepPred => "current_step_pred",
        }
    }
}

impl std::str::FromStr for ConditionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionStrategy::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition strategy {s:?}")))
    }
}

/// Grid time of a recorded step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepTime {
    Discrete(usize),
    Continuous(f64),
}

impl StepTime {
    pub fn as_f64(self) -> f64 {
        match self {
            StepTime::Discrete(t) => t as f64,
            StepTime::Continuous(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub step_times: Vec<StepTime>,
    /// Input state of each step.
    pub states: Vec<Tensor>,
    /// Network estimate used by each step (noise or velocity).
    pub eps_hats: Vec<Tensor>,
    /// Clean-sample estimate implied by each step.
    pub x0_preds: Vec<Tensor>,
    #[serde(rename = "final")]
    pub final_sample: Tensor,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.step_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step_times.is_empty()
    }

    pub fn export(&self, config_hash: &str) -> TrajectoryExport {
        let rows = |ts: &[Tensor]| ts.iter().map(|t| t.data().to_vec()).collect();
        TrajectoryExport {
            config_hash: config_hash.to_string(),
            step_times: self.step_times.clone(),
            states: rows(&self.states),
            eps_hats: rows(&self.eps_hats),
            x0_preds: rows(&self.x0_preds),
            final_sample: self.final_sample.data().to_vec(),
        }
    }
}

/// Plain-array JSON form of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryExport {
    pub config_hash: String,
    pub step_times: Vec<StepTime>,
    pub states: Vec<Vec<f64>>,
    pub eps_hats: Vec<Vec<f64>>,
    pub x0_preds: Vec<Vec<f64>>,
    #[serde(rename = "final")]
    pub final_sample: Vec<f64>,
}

impl TrajectoryExport {
    pub fn into_trajectory(self) -> Result<Trajectory> {
        let tensors = |rows: Vec<Vec<f64>>| -> Result<Vec<Tensor>> {
            rows.into_iter().map(Tensor::vector).collect()
        };
        let traj = Trajectory {
            step_times: self.step_times,
            states: tensors(self.states)?,
            eps_hats: tensors(self.eps_hats)?,
            x0_preds: tensors(self.x0_preds)?,
            final_sample: Tensor::vector(self.final_sample)?,
        };
        let n = traj.step_times.len();
        if traj.states.len() != n || traj.eps_hats.len() != n || traj.x0_preds.len() != n {
            return Err(Error::Dimension("trajectory lists have different lengths".into()));
        }
        Ok(traj)
    }
}

/// Writes trajectories as CSV: one row per step plus one `final` row per
/// chain, with state and clean-estimate coordinates side by side.
pub fn write_trajectories_csv<W: Write>(out: &mut W, trajs: &[Trajectory]) -> std::io::Result<()> {
    let Some(first) = trajs.first() else {
        return Ok(());
    };
    let d = first.final_sample.numel();
    let mut header = vec!["chain".to_string(), "step".into(), "time".into()];
    header.extend((0..d).map(|k| format!("state_{k}")));
    header.extend((0..d).map(|k| format!("x0_pred_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for (c, traj) in trajs.iter().enumerate() {
        for i in 0..traj.len() {
            let mut row = vec![c.to_string(), i.to_string(), traj.step_times[i].as_f64().to_string()];
            row.extend(traj.states[i].data().iter().map(f64::to_string));
            row.extend(traj.x0_preds[i].data().iter().map(f64::to_string));
            writeln!(out, "{}", row.join(","))?;
        }
        let mut row = vec![c.to_string(), "final".into(), "0".into()];
        row.extend(traj.final_sample.data().iter().map(f64::to_string));
        row.extend(traj.final_sample.data().iter().map(f64::to_string));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// `N` descending steps spread uniformly over `0..T`, from `T - 1` to `0`.
pub fn time_grid(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::Config(format!(
            "step count {n} must lie in 1..={total}"
        )));
    }
    if n == 1 {
        return Ok(vec![total - 1]);
    }
    let span = (total - 1) as f64;
    Ok((0..n)
        .map(|i| (span * (n - 1 - i) as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

/// Deterministic DDIM update from step `t` to `t_prev`; `None` returns the
/// clean estimate itself.
pub fn ddim_step(
    sched: &NoiseSchedule,
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: Option<usize>,
) -> Result<Tensor> {
    let x0 = sched.predict_x0(x_t, eps_hat, t)?;
    renoise(sched, &x0, eps_hat, t, t_prev)
}

fn renoise(sched: &NoiseSchedule, x0: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>) -> Result<Tensor> {
    match t_prev {
        None => Ok(x0.clone()),
        Some(tp) if tp > t => Err(Error::Contract(format!(
            "DDIM times must descend, got {t} -> {tp}"
        ))),
        Some(tp) => sched.q_sample(x0, eps, tp),
    }
}

/// Replaces the re-noising estimate at one grid time by
/// `(eps_hat + w * eps_p) / sqrt(1 + w^2)`.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub at_step: usize,
    pub weight: f64,
    /// `[B, d]` perturbation directions, one per chain.
    pub directions: Tensor,
}

struct Recorder {
    trajs: Vec<Trajectory>,
}

impl Recorder {
    fn new(rows: usize) -> Self {
        let empty = Trajectory {
            step_times: Vec::new(),
            states: Vec::new(),
            eps_hats: Vec::new(),
            x0_preds: Vec::new(),
            final_sample: Tensor::scalar(0.0),
        };
        Recorder {
            trajs: vec![empty; rows],
        }
    }

    fn push(&mut self, time: StepTime, x: &Tensor, est: &Tensor, x0: &Tensor) {
        for (i, traj) in self.trajs.iter_mut().enumerate() {
            traj.step_times.push(time);
            traj.states.push(x.row_tensor(i));
            traj.eps_hats.push(est.row_tensor(i));
            traj.x0_preds.push(x0.row_tensor(i));
        }
    }

    fn finish(mut self, x: &Tensor) -> Vec<Trajectory> {
        for (i, traj) in self.trajs.iter_mut().enumerate() {
            traj.final_sample = x.row_tensor(i);
        }
        self.trajs
    }
}

/// Network estimate at one step under `strategy`.
fn estimate(
    net: &Denoiser,
    strategy: ConditionStrategy,
    first: bool,
    x: &Tensor,
    initial: &Tensor,
    previous: &Tensor,
    t_norm: f64,
) -> Result<Tensor> {
    let times = vec![t_norm; x.rows()];
    let zero = || Tensor::zeros(x.shape());
    if first {
        return net.forward_batch(x, &zero(), &times);
    }
    match strategy {
        ConditionStrategy::Zero => net.forward_batch(x, &zero(), &times),
        ConditionStrategy::GroundtruthEps => net.forward_batch(x, initial, &times),
        ConditionStrategy::PrevStepPred => net.forward_batch(x, previous, &times),
        ConditionStrategy::CurrentStepPred => {
            let pre = net.forward_batch(x, &zero(), &times)?;
            net.forward_batch(x, &pre, &times)
        }
    }
}

fn check_batch(net: &Denoiser, x: &Tensor) -> Result<usize> {
    let (rows, d) = x.dims2("initial states")?;
    if d != net.data_dim() {
        return Err(Error::Dimension(format!(
            "initial states have width {d}, network expects {}",
            net.data_dim()
        )));
    }
    Ok(rows)
}

/// DDIM sampling of every row of `x_big_t` (`[B, d]`).
pub fn sample_batch(
    net: &Denoiser,
    sched: &NoiseSchedule,
    strategy: ConditionStrategy,
    n: usize,
    x_big_t: &Tensor,
) -> Result<Vec<Trajectory>> {
    sample_batch_perturbed(net, sched, strategy, n, x_big_t, None)
}

pub fn sample_batch_perturbed(
    net: &Denoiser,
    sched: &NoiseSchedule,
    strategy: ConditionStrategy,
    n: usize,
    x_big_t: &Tensor,
    perturbation: Option<&Perturbation>,
) -> Result<Vec<Trajectory>> {
    let rows = check_batch(net, x_big_t)?;
    let grid = time_grid(sched.len(), n)?;
    if let Some(p) = perturbation {
        if !grid.contains(&p.at_step) {
            return Err(Error::Config(format!(
                "perturbation step {} is not on the {n}-step grid",
                p.at_step
            )));
        }
        p.directions.same_shape(x_big_t, "perturbation directions")?;
    }
    let mut rec = Recorder::new(rows);
    let mut x = x_big_t.clone();
    let mut previous = Tensor::zeros(x.shape());
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied();
        let eps_hat = estimate(net, strategy, i == 0, &x, x_big_t, &previous, sched.normalized_time(t))?;
        let x0 = sched.predict_x0(&x, &eps_hat, t)?;
        rec.push(StepTime::Discrete(t), &x, &eps_hat, &x0);
        let renoise_eps = match perturbation {
            Some(p) if p.at_step == t => {
                let w = p.weight;
                eps_hat.axpby(1.0 / (1.0 + w * w).sqrt(), &p.directions, w / (1.0 + w * w).sqrt())?
            }
            _ => eps_hat.clone(),
        };
        x = renoise(sched, &x0, &renoise_eps, t, t_prev)?;
        previous = eps_hat;
    }
    Ok(rec.finish(&x))
}

/// DDIM sampling of a single chain from rank-1 `x_big_t`.
pub fn sample(
    net: &Denoiser,
    sched: &NoiseSchedule,
    strategy: ConditionStrategy,
    n: usize,
    x_big_t: &Tensor,
) -> Result<Trajectory> {
    let mut trajs = sample_batch(net, sched, strategy, n, &x_big_t.as_matrix())?;
    Ok(trajs.remove(0))
}

/// Euler integration of `dx/dt = v` backwards from `t = 1` to `t = 0` for
/// every row of `x1`. Each step records the straight-line clean estimate
/// `x - t * v`.
pub fn sample_toy_batch(net: &Denoiser, strategy: ConditionStrategy, n: usize, x1: &Tensor) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Config("step count must be at least 1".into()));
    }
    let rows = check_batch(net, x1)?;
    let dt = 1.0 / n as f64;
    let mut rec = Recorder::new(rows);
    let mut x = x1.clone();
    let mut previous = Tensor::zeros(x.shape());
    for i in 0..n {
        let t = 1.0 - i as f64 * dt;
        let v = estimate(net, strategy, i == 0, &x, x1, &previous, t)?;
        let x0 = x.axpby(1.0, &v, -t)?;
        rec.push(StepTime::Continuous(t), &x, &v, &x0);
        x = x.axpby(1.0, &v, -dt)?;
        previous = v;
    }
    Ok(rec.finish(&x))
}

pub fn sample_toy(net: &Denoiser, strategy: ConditionStrategy, n: usize, x1: &Tensor) -> Result<Trajectory> {
    let mut trajs = sample_toy_batch(net, strategy, n, &x1.as_matrix())?;
    Ok(trajs.remove(0))
}
