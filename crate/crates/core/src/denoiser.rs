//! Conditional MLP denoiser `f(x_t, c, t)`.
//!
//! Three ways of consuming the condition `c`:
//!
//! * `Unconditional` ignores it and refuses anything but the zero tensor.
//! * `Concat` feeds `[x_t, c, emb(t)]` to the first layer.
//! * `ControlBranch` runs a second encoder with the trunk's layer shapes on
//!   `[c, emb(t)]` and adds each of its hidden states onto the matching trunk
//!   hidden state. There is no zero-initialised projection in between.
//!
//! Whether the output is read as predicted noise or as a velocity is up to
//! the caller.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DEFAULT_TIME_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];
const EMBED_BASE_FREQ: f64 = 1.0;
const EMBED_FREQ_RATIO: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unconditional,
    Concat,
    ControlBranch,
}

impl Arch {
    pub fn is_conditional(self) -> bool {
        !matches!(self, Arch::Unconditional)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub arch: Arch,
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    /// Start the output layer at zero so the untrained net predicts 0.
    #[serde(default = "default_true")]
    pub zero_init_output: bool,
}

impl DenoiserConfig {
    pub fn new(arch: Arch, data_dim: usize) -> Self {
        DenoiserConfig {
            arch,
            data_dim,
            hidden_dims: DEFAULT_HIDDEN.to_vec(),
            time_embed_dim: DEFAULT_TIME_EMBED_DIM,
            zero_init_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::Config("data_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "hidden_dims must be non-empty and positive, got {:?}",
                self.hidden_dims
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Width of the first trunk layer's input.
    pub fn input_width(&self) -> usize {
        match self.arch {
            Arch::Concat => 2 * self.data_dim + self.time_embed_dim,
            Arch::Unconditional | Arch::ControlBranch => self.data_dim + self.time_embed_dim,
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        let mut table = Vec::new();
        let encoder = |prefix: &str, table: &mut Vec<(String, Vec<usize>)>| {
            let mut fan_in = self.input_width();
            for (k, &h) in self.hidden_dims.iter().enumerate() {
                table.push((format!("{prefix}.{k}.weight"), vec![fan_in, h]));
                table.push((format!("{prefix}.{k}.bias"), vec![h]));
                fan_in = h;
            }
        };
        encoder("trunk", &mut table);
        if self.arch == Arch::ControlBranch {
            encoder("branch", &mut table);
        }
        let last = *self.hidden_dims.last().expect("validated");
        table.push(("out.weight".into(), vec![last, self.data_dim]));
        table.push(("out.bias".into(), vec![self.data_dim]));
        table
    }
}

/// Sinusoidal embedding `[sin(f_0 t), cos(f_0 t), sin(f_1 t), ...]` with
/// frequencies spaced geometrically from 1 to 100.
pub fn time_embedding(t_norm: f64, dim: usize) -> Result<Tensor> {
    time_embedding_with(t_norm, dim, EMBED_BASE_FREQ, EMBED_FREQ_RATIO)
}

pub fn time_embedding_with(t_norm: f64, dim: usize, base: f64, ratio: f64) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dim must be even, got {dim}")));
    }
    Ok(Tensor::from_parts(vec![dim], embed_row(t_norm, dim, base, ratio)))
}

fn frequencies(dim: usize, base: f64, ratio: f64) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|k| {
            if half == 1 {
                base
            } else {
                base * ratio.powf(k as f64 / (half - 1) as f64)
            }
        })
        .collect()
}

fn embed_into(out: &mut Vec<f64>, t: f64, freqs: &[f64]) {
    for f in freqs {
        out.push((f * t).sin());
        out.push((f * t).cos());
    }
}

fn embed_row(t: f64, dim: usize, base: f64, ratio: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    embed_into(&mut out, t, &frequencies(dim, base, ratio));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: Vec<Tensor>,
}

impl Denoiser {
    /// He-uniform hidden layers, zero biases, output layer per config.
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config
            .shape_table()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else if name.starts_with("out.") {
                    if config.zero_init_output {
                        Tensor::zeros(&shape)
                    } else {
                        Tensor::uniform(&shape, (3.0 / shape[0] as f64).sqrt(), rng)
                    }
                } else {
                    Tensor::uniform(&shape, (6.0 / shape[0] as f64).sqrt(), rng)
                }
            })
            .collect();
        Ok(Denoiser { config, params })
    }

    /// Rebuilds a network from stored tensors, checking them against the
    /// shape table for `config`.
    pub fn from_params(config: DenoiserConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let table = config.shape_table();
        if table.len() != params.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                table.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in table.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Denoiser { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.shape_table().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    /// Zeroes every weight and bias of the control branch.
    pub fn zero_branch(&mut self) {
        for (i, name) in self.param_names().iter().enumerate() {
            if name.starts_with("branch.") {
                self.params[i] = Tensor::zeros(self.params[i].shape());
            }
        }
    }

    /// The trunk and head of a control-branch net as an unconditional net.
    pub fn trunk_only(&self) -> Result<Denoiser> {
        let config = DenoiserConfig {
            arch: Arch::Unconditional,
            ..self.config.clone()
        };
        let params = self
            .param_names()
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| !n.starts_with("branch."))
            .map(|(_, p)| p.clone())
            .collect();
        Denoiser::from_params(config, params)
    }

    /// Loads the parameters onto `tape` as tracked leaves (`trainable`) or
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// `[B, E]` time embedding matrix for per-row times.
    pub fn embed_times(&self, t_norm: &[f64]) -> Result<Tensor> {
        let dim = self.config.time_embed_dim;
        let freqs = frequencies(dim, EMBED_BASE_FREQ, EMBED_FREQ_RATIO);
        let mut data = Vec::with_capacity(t_norm.len() * dim);
        for &t in t_norm {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Contract(format!("t_norm {t} outside [0, 1]")));
            }
            embed_into(&mut data, t, &freqs);
        }
        Tensor::matrix(t_norm.len(), dim, data)
    }

    fn check_inputs(&self, x: &Tensor, cond: &Tensor, rows: usize) -> Result<()> {
        let d = self.config.data_dim;
        if x.shape() != [rows, d] {
            return Err(Error::Dimension(format!(
                "x_t must be [{rows}, {d}], got {:?}",
                x.shape()
            )));
        }
        x.same_shape(cond, "condition")?;
        if self.config.arch == Arch::Unconditional && !cond.is_zero() {
            return Err(Error::Contract(
                "unconditional denoiser was given a nonzero condition".into(),
            ));
        }
        Ok(())
    }

    /// Records a batched forward pass. `x` and `cond` are `[B, d]` and
    /// `temb` is `[B, E]`; `vars` come from [`Denoiser::bind`].
    pub fn record(&self, tape: &mut Tape, vars: &[Var], x: Var, cond: Var, temb: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        self.check_inputs(tape.value(x), tape.value(cond), rows)?;
        let layers = self.config.hidden_dims.len();
        let trunk = &vars[..2 * layers];
        let head = &vars[vars.len() - 2..];

        let input = match self.config.arch {
            Arch::Concat => tape.concat_cols(&[x, cond, temb])?,
            Arch::Unconditional | Arch::ControlBranch => tape.concat_cols(&[x, temb])?,
        };
        let branch_states = match self.config.arch {
            Arch::ControlBranch => {
                let branch = &vars[2 * layers..4 * layers];
                let mut h = tape.concat_cols(&[cond, temb])?;
                let mut states = Vec::with_capacity(layers);
                for k in 0..layers {
                    h = dense_silu(tape, h, branch[2 * k], branch[2 * k + 1])?;
                    states.push(h);
                }
                Some(states)
            }
            _ => None,
        };

        let mut h = input;
        for k in 0..layers {
            h = dense_silu(tape, h, trunk[2 * k], trunk[2 * k + 1])?;
            if let Some(states) = &branch_states {
                h = tape.add(h, states[k])?;
            }
        }
        let out = tape.matmul(h, head[0])?;
        tape.add_bias(out, head[1])
    }

    /// Batched evaluation without gradients: `x`, `cond` are `[B, d]`.
    pub fn forward_batch(&self, x: &Tensor, cond: &Tensor, t_norm: &[f64]) -> Result<Tensor> {
        self.check_inputs(x, cond, t_norm.len())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.clone());
        let tv = tape.constant(self.embed_times(t_norm)?);
        let out = self.record(&mut tape, &vars, xv, cv, tv)?;
        Ok(tape.value(out).clone())
    }

    /// Single-example evaluation on rank-1 `x_t` and `cond`.
    pub fn forward(&self, x_t: &Tensor, cond: &Tensor, t_norm: f64) -> Result<Tensor> {
        let d = self.config.data_dim;
        if x_t.shape() != [d] || cond.shape() != [d] {
            return Err(Error::Dimension(format!(
                "expected [{d}] inputs, got {:?} and {:?}",
                x_t.shape(),
                cond.shape()
            )));
        }
        let out = self.forward_batch(&x_t.as_matrix(), &cond.as_matrix(), &[t_norm])?;
        out.reshape(vec![d])
    }
}

fn dense_silu(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(h, w)?;
    let z = tape.add_bias(z, b)?;
    Ok(tape.silu(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Adam, AdamConfig};
    use crate::rng::seeded;
    use crate::training::{regression_objective, FlowPair, TrainConfig, TrainMode, Trainer};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn random_net(arch: Arch, d: usize, seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            zero_init_output: false,
            ..DenoiserConfig::new(arch, d)
        };
        Denoiser::new(cfg, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn embedding_at_zero_alternates() {
        let e = time_embedding(0.0, 8).unwrap();
        assert_eq!(e.data(), &[0., 1., 0., 1., 0., 1., 0., 1.]);
    }

    #[test]
    fn embedding_direct_evaluation() {
        let e = time_embedding_with(0.5, 4, 1.0, 100.0).unwrap();
        let want = [0.5f64.sin(), 0.5f64.cos(), 50f64.sin(), 50f64.cos()];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(time_embedding(0.5, 4).unwrap(), e);
    }

    #[test]
    fn embedding_distinguishes_times_and_rejects_odd_dims() {
        let a = time_embedding(0.25, 16).unwrap();
        let b = time_embedding(0.75, 16).unwrap();
        assert_ne!(a, b);
        assert!(matches!(time_embedding(0.1, 5), Err(Error::Config(_))));
    }

    #[test]
    fn input_widths() {
        let c = DenoiserConfig::new(Arch::Concat, 2);
        assert_eq!(c.input_width(), 2 * 2 + 16);
        assert_eq!(c.shape_table()[0].1, vec![20, 64]);
        let u = DenoiserConfig::new(Arch::Unconditional, 2);
        assert_eq!(u.input_width(), 18);
        let cb = DenoiserConfig::new(Arch::ControlBranch, 2);
        let table = cb.shape_table();
        for k in 0..3 {
            let trunk = &table.iter().find(|(n, _)| *n == format!("trunk.{k}.weight")).unwrap().1;
            let branch = &table.iter().find(|(n, _)| *n == format!("branch.{k}.weight")).unwrap().1;
            assert_eq!(trunk, branch);
        }
    }

    #[test]
    fn fresh_net_outputs_zero_with_finite_shape() {
        let net = Denoiser::new(DenoiserConfig::new(Arch::Concat, 2), &mut seeded(1)).unwrap();
        let x = Tensor::vector(vec![0.3, -0.2]).unwrap();
        let out = net.forward(&x, &x, 0.4).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert!(out.is_zero());
    }

    #[test]
    fn concat_is_condition_sensitive() {
        let net = random_net(Arch::Concat, 2, 5);
        let mut rng = seeded(6);
        let x = Tensor::randn(&[2], &mut rng);
        let a = Tensor::randn(&[2], &mut rng);
        let b = Tensor::randn(&[2], &mut rng);
        let ya = net.forward(&x, &a, 0.3).unwrap();
        let yb = net.forward(&x, &b, 0.3).unwrap();
        assert!(ya.all_finite());
        assert_ne!(ya, yb);
    }

    #[test]
    fn unconditional_rejects_nonzero_condition() {
        let net = random_net(Arch::Unconditional, 2, 2);
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(net.forward(&x, &Tensor::zeros(&[2]), 0.5).is_ok());
        assert!(matches!(net.forward(&x, &x, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_branch_equals_trunk() {
        let mut net = random_net(Arch::ControlBranch, 3, 9);
        net.zero_branch();
        let trunk = net.trunk_only().unwrap();
        let mut rng = seeded(10);
        for _ in 0..20 {
            let x = Tensor::randn(&[3], &mut rng);
            let c = Tensor::randn(&[3], &mut rng);
            let t: f64 = rand::Rng::random(&mut rng);
            let full = net.forward(&x, &c, t).unwrap();
            let alone = trunk.forward(&x, &Tensor::zeros(&[3]), t).unwrap();
            assert!(full.max_abs_diff(&alone).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let net = random_net(Arch::ControlBranch, 2, 3);
        let mut rng = seeded(4);
        let x = Tensor::randn(&[5, 2], &mut rng);
        let c = Tensor::randn(&[5, 2], &mut rng);
        let ts = [0.0, 0.2, 0.4, 0.8, 1.0];
        let batch = net.forward_batch(&x, &c, &ts).unwrap();
        for i in 0..5 {
            let single = net.forward(&x.row_tensor(i), &c.row_tensor(i), ts[i]).unwrap();
            assert_eq!(single.data(), batch.row(i));
        }
    }

    #[test]
    fn time_out_of_range_is_rejected() {
        let net = random_net(Arch::Concat, 2, 3);
        let x = Tensor::zeros(&[2]);
        assert!(matches!(net.forward(&x, &x, 1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn from_params_checks_shapes() {
        let net = random_net(Arch::Concat, 2, 3);
        let mut params = net.params().to_vec();
        assert!(Denoiser::from_params(net.config().clone(), params.clone()).is_ok());
        params[0] = Tensor::zeros(&[3, 3]);
        assert!(Denoiser::from_params(net.config().clone(), params).is_err());
    }

    struct Batch {
        x: Tensor,
        cond: Tensor,
        t: Vec<f64>,
        target: Tensor,
    }

    fn random_batch(arch: Arch, rows: usize, d: usize, rng: &mut impl Rng) -> Batch {
        let x = Tensor::randn(&[rows, d], rng);
        let cond = if arch.is_conditional() {
            Tensor::randn(&[rows, d], rng)
        } else {
            Tensor::zeros(&[rows, d])
        };
        let t = (0..rows).map(|_| rng.random_range(0.0..=1.0)).collect();
        Batch {
            x,
            cond,
            t,
            target: Tensor::randn(&[rows, d], rng),
        }
    }

    fn grads(net: &Denoiser, b: &Batch) -> Vec<Tensor> {
        regression_objective(net, &b.x, &b.cond, &b.t, &b.target).unwrap().1
    }

    const ARCHS: [Arch; 3] = [Arch::Unconditional, Arch::Concat, Arch::ControlBranch];

    #[test]
    fn every_parameter_gets_a_gradient() {
        for arch in ARCHS {
            let net = random_net(arch, 2, 7);
            let b = random_batch(arch, 16, 2, &mut seeded(8));
            for (name, g) in net.param_names().iter().zip(grads(&net, &b)) {
                assert!(!g.is_zero(), "{arch:?} {name}");
            }
        }
    }

    // The zero output layer blocks every gradient below it on the first
    // step only.
    #[test]
    fn zero_init_unblocks_after_one_step() {
        for arch in ARCHS {
            let mut net = Denoiser::new(DenoiserConfig::new(arch, 2), &mut seeded(9)).unwrap();
            let b = random_batch(arch, 16, 2, &mut seeded(10));
            let first = grads(&net, &b);
            let blocked = net.param_names().iter().zip(&first).filter(|(_, g)| g.is_zero()).count();
            assert_eq!(blocked, net.params().len() - 2, "{arch:?}");
            let mut adam = Adam::new(AdamConfig::default(), net.params());
            adam.step(net.params_mut(), &first).unwrap();
            for (name, g) in net.param_names().iter().zip(grads(&net, &b)) {
                assert!(!g.is_zero(), "{arch:?} {name}");
            }
        }
    }

    #[test]
    fn trained_concat_stays_condition_sensitive() {
        let mut rng = seeded(11);
        let data: Vec<FlowPair> = (0..256)
            .map(|_| FlowPair::new(Tensor::randn(&[2], &mut rng), Tensor::randn(&[2], &mut rng)).unwrap())
            .collect();
        let cfg = DenoiserConfig {
            hidden_dims: vec![32, 32],
            ..DenoiserConfig::new(Arch::Concat, 2)
        };
        let mut tc = TrainConfig::new(TrainMode::ToyVelocity, true, 11);
        tc.steps = 300;
        tc.batch_size = 32;
        let mut trainer = Trainer::new(Denoiser::new(cfg, &mut rng).unwrap(), tc).unwrap();
        trainer.fit(None, &data, |_| {}).unwrap();
        for _ in 0..100 {
            let x = Tensor::randn(&[2], &mut rng);
            let c1 = Tensor::randn(&[2], &mut rng);
            let c2 = Tensor::randn(&[2], &mut rng);
            let t = rng.random_range(0.0..=1.0);
            let gap = trainer.net.forward(&x, &c1, t).unwrap().distance(&trainer.net.forward(&x, &c2, t).unwrap());
            assert!(gap.unwrap() > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradients_match_central_differences(
            seed in 0u64..10_000,
            arch in 0usize..3,
            rows in 1usize..4,
            w1 in 2usize..8,
            w2 in 2usize..8,
        ) {
            let arch = ARCHS[arch];
            let mut rng = seeded(seed);
            let cfg = DenoiserConfig {
                hidden_dims: vec![w1, w2],
                time_embed_dim: 4,
                zero_init_output: false,
                ..DenoiserConfig::new(arch, 2)
            };
            let net = Denoiser::new(cfg, &mut rng).unwrap();
            let b = random_batch(arch, rows, 2, &mut rng);
            let analytic = grads(&net, &b);
            // loss evaluated directly, off the tape
            let loss = |n: &Denoiser| {
                let out = n.forward_batch(&b.x, &b.cond, &b.t).unwrap();
                out.data().iter().zip(b.target.data()).map(|(o, y)| (o - y) * (o - y)).sum::<f64>() / rows as f64
            };
            let h = 1e-5;
            let mut probe = net.clone();
            for k in 0..net.params().len() {
                for j in 0..net.params()[k].numel() {
                    let orig = net.params()[k].data()[j];
                    probe.params_mut()[k].data_mut()[j] = orig + h;
                    let up = loss(&probe);
                    probe.params_mut()[k].data_mut()[j] = orig - h;
                    let down = loss(&probe);
                    probe.params_mut()[k].data_mut()[j] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[k].data()[j];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    prop_assert!(rel < 1e-4, "param {k}[{j}]: {a} vs {numeric}");
                }
            }
        }
    }
}
