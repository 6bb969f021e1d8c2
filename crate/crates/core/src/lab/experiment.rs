//! End-to-end runs: train the baseline and the non-crossing model, sample
//! every (method, step count) cell from shared initial noise, score it and
//! write the artifacts.
//!
//! A run lives in `<out_dir>/<first 16 hex digits of config_hash>/`:
//!
//! ```text
//! config.json                  canonical config
//! <role>.ckpt, train_<role>.jsonl
//! reports/<method>_N<n>.json   MetricReport per cell
//! sweep.csv                    N_steps,method,ifc,ood_rate,fidelity
//! finals.csv                   every final sample
//! consistency.csv              mean distance of finals to the largest N
//! trajectories/<method>_N<n>.{json,csv}
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::dataset::{generate_dataset, initial_noise, modes, reference_set};
use crate::denoiser::{Arch, Denoiser};
use crate::error::{Error, Result};
use crate::metrics::{data_range, fidelity_proxy, mean_final_distance, mean_ifc, ood_rate, MetricReport};
use crate::numerics::Tensor;
use crate::rng::{substream, Purpose};
use crate::sampling::{sample_batch, sample_toy_batch, write_trajectories_csv, ConditionStrategy, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::training::{StepStats, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Baseline,
    Noncross,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Baseline => "baseline",
            Role::Noncross => "noncross",
        }
    }
}

/// A trained model plus the strategy used to sample it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Method {
    pub role: Role,
    pub strategy: ConditionStrategy,
}

impl Method {
    pub fn name(&self) -> String {
        match self.role {
            Role::Baseline => "baseline".into(),
            Role::Noncross => format!("noncross_{}", self.strategy.name()),
        }
    }
}

/// The unconditional baseline followed by one method per configured
/// strategy.
pub fn methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let mut out = vec![Method {
        role: Role::Baseline,
        strategy: ConditionStrategy::Zero,
    }];
    out.extend(cfg.sample.strategies.iter().map(|&strategy| Method {
        role: Role::Noncross,
        strategy,
    }));
    out
}

#[derive(Clone, Debug)]
pub struct Models {
    pub baseline: Trainer,
    pub noncross: Trainer,
}

impl Models {
    pub fn get(&self, role: Role) -> &Trainer {
        match role {
            Role::Baseline => &self.baseline,
            Role::Noncross => &self.noncross,
        }
    }
}

pub fn run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(cfg.resolved_out_dir().join(&cfg.config_hash()?[..16]))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Fresh trainer for one role, initialised from the shared seed.
pub fn new_trainer(cfg: &ExperimentConfig, role: Role) -> Result<Trainer> {
    let arch = match role {
        Role::Baseline => Arch::Unconditional,
        Role::Noncross => cfg.model.arch,
    };
    let net = Denoiser::new(cfg.denoiser_config(arch), &mut substream(cfg.seed, Purpose::Init, 0))?;
    let mut tc = cfg.train.clone();
    tc.conditioned = arch.is_conditional();
    Trainer::new(net, tc)
}

/// Trains one role to completion, reporting every step.
pub fn train_role(cfg: &ExperimentConfig, role: Role, on_step: impl FnMut(&StepStats)) -> Result<Trainer> {
    cfg.validate()?;
    let data = generate_dataset(cfg)?;
    let sched = cfg.schedule.build()?;
    let mut trainer = new_trainer(cfg, role)?;
    trainer.fit(sched.as_ref(), &data, on_step)?;
    Ok(trainer)
}

/// Trains both models in memory.
pub fn train_models(cfg: &ExperimentConfig) -> Result<Models> {
    Ok(Models {
        baseline: train_role(cfg, Role::Baseline, |_| {})?,
        noncross: train_role(cfg, Role::Noncross, |_| {})?,
    })
}

fn checkpoint_path(dir: &Path, role: Role) -> PathBuf {
    dir.join(format!("{}.ckpt", role.name()))
}

/// Loads both models from `dir` when checkpoints for this exact config
/// exist, otherwise trains them and writes checkpoints and JSONL logs.
pub fn train_or_load(cfg: &ExperimentConfig, dir: &Path) -> Result<Models> {
    create_dir(dir)?;
    let hash = cfg.config_hash()?;
    let get = |role: Role| -> Result<Trainer> {
        let path = checkpoint_path(dir, role);
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            if ck.config.config_hash()? == hash && ck.trainer.step_count() == cfg.train.steps {
                return Ok(ck.trainer);
            }
        }
        let log_path = dir.join(format!("train_{}.jsonl", role.name()));
        let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut failed = None;
        let trainer = train_role(cfg, role, |s| {
            if failed.is_none() {
                let line = serde_json::to_string(s).expect("step stats serialize");
                if let Err(e) = writeln!(log, "{line}") {
                    failed = Some(e);
                }
            }
        })?;
        if let Some(e) = failed {
            return Err(Error::io(&log_path, e));
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        Checkpoint::new(cfg.clone(), role.name(), cfg.schedule.build()?, trainer.clone()).save(&path)?;
        Ok(trainer)
    };
    Ok(Models {
        baseline: get(Role::Baseline)?,
        noncross: get(Role::Noncross)?,
    })
}

/// Samples every row of `init` with `n` steps: DDIM on a discrete schedule,
/// Euler otherwise.
pub fn sample_with(
    net: &Denoiser,
    sched: Option<&NoiseSchedule>,
    strategy: ConditionStrategy,
    n: usize,
    init: &Tensor,
) -> Result<Vec<Trajectory>> {
    match sched {
        Some(s) => sample_batch(net, s, strategy, n, init),
        None => sample_toy_batch(net, strategy, n, init),
    }
}

/// One sampled and scored cell of the sweep.
#[derive(Clone, Debug)]
pub struct Cell {
    pub method: Method,
    pub n_steps: usize,
    pub report: MetricReport,
    pub trajectories: Vec<Trajectory>,
}

impl Cell {
    pub fn finals(&self) -> Vec<Tensor> {
        self.trajectories.iter().map(|t| t.final_sample.clone()).collect()
    }

    fn stem(&self) -> String {
        format!("{}_N{}", self.method.name(), self.n_steps)
    }
}

/// Samples and scores every (method, step count) cell.
pub fn evaluate(cfg: &ExperimentConfig, models: &Models) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let hash = cfg.config_hash()?;
    let sched = cfg.schedule.build()?;
    let n = cfg.sample.n_samples;
    let init = initial_noise(cfg, n);
    let reference = reference_set(cfg, n);
    let range = data_range(&reference)?;
    let centres = modes(&cfg.dataset);
    let radius = cfg.ood_radius();
    let mut cells = Vec::new();
    for method in methods(cfg) {
        let net = &models.get(method.role).net;
        for &steps in &cfg.sample.step_counts {
            let trajectories = sample_with(net, sched.as_ref(), method.strategy, steps, &init)?;
            let finals: Vec<Tensor> = trajectories.iter().map(|t| t.final_sample.clone()).collect();
            let report = MetricReport {
                method: method.name(),
                n_steps: steps,
                ifc: mean_ifc(&trajectories, range)?,
                ood_rate: ood_rate(&finals, &centres, radius)?,
                fidelity: fidelity_proxy(&finals, &reference)?,
                n_samples: n,
                config_hash: hash.clone(),
            };
            cells.push(Cell {
                method,
                n_steps: steps,
                report,
                trajectories,
            });
        }
    }
    Ok(cells)
}

/// Mean distance between each cell's finals and the same method's finals at
/// the largest step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub method: String,
    pub n_steps: usize,
    pub reference_n_steps: usize,
    pub mean_final_distance: f64,
}

pub fn consistency(cells: &[Cell]) -> Result<Vec<ConsistencyRow>> {
    let mut rows = Vec::new();
    for cell in cells {
        let name = cell.method.name();
        let reference = cells
            .iter()
            .filter(|c| c.method == cell.method)
            .max_by_key(|c| c.n_steps)
            .expect("the cell itself matches");
        rows.push(ConsistencyRow {
            method: name,
            n_steps: cell.n_steps,
            reference_n_steps: reference.n_steps,
            mean_final_distance: mean_final_distance(&cell.trajectories, &reference.trajectories)?,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(cells: &[Cell]) -> String {
    let mut out = String::from("N_steps,method,ifc,ood_rate,fidelity\n");
    for c in cells {
        let r = &c.report;
        out.push_str(&format!("{},{},{},{},{}\n", r.n_steps, r.method, r.ifc, r.ood_rate, r.fidelity));
    }
    out
}

pub fn finals_csv(cells: &[Cell]) -> String {
    let d = cells.first().map_or(0, |c| c.trajectories[0].final_sample.numel());
    let mut out = String::from("method,N_steps,chain");
    for k in 0..d {
        out.push_str(&format!(",x_{k}"));
    }
    out.push('\n');
    for c in cells {
        let name = c.method.name();
        for (i, t) in c.trajectories.iter().enumerate() {
            out.push_str(&format!("{name},{},{i}", c.n_steps));
            for v in t.final_sample.data() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Writes trajectories and finals for every cell.
pub fn write_samples(cfg: &ExperimentConfig, dir: &Path, cells: &[Cell]) -> Result<()> {
    let hash = cfg.config_hash()?;
    let traj_dir = dir.join("trajectories");
    create_dir(&traj_dir)?;
    for c in cells {
        let keep = &c.trajectories[..cfg.sample.export_trajectories.min(c.trajectories.len())];
        let exports: Vec<_> = keep.iter().map(|t| t.export(&hash)).collect();
        let json_path = traj_dir.join(format!("{}.json", c.stem()));
        write_file(&json_path, serde_json::to_string(&exports)?.as_bytes())?;
        let csv_path = traj_dir.join(format!("{}.csv", c.stem()));
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, keep).map_err(|e| Error::io(&csv_path, e))?;
        write_file(&csv_path, &buf)?;
    }
    write_file(&dir.join("finals.csv"), finals_csv(cells).as_bytes())
}

/// Writes per-cell reports, the sweep table and the consistency table.
pub fn write_reports(dir: &Path, cells: &[Cell]) -> Result<()> {
    let report_dir = dir.join("reports");
    create_dir(&report_dir)?;
    for c in cells {
        let path = report_dir.join(format!("{}.json", c.stem()));
        write_file(&path, serde_json::to_string_pretty(&c.report)?.as_bytes())?;
    }
    write_file(&dir.join("sweep.csv"), sweep_csv(cells).as_bytes())?;
    let mut out = String::from("method,N_steps,reference_N_steps,mean_final_distance\n");
    for r in consistency(cells)? {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.method, r.n_steps, r.reference_n_steps, r.mean_final_distance
        ));
    }
    write_file(&dir.join("consistency.csv"), out.as_bytes())
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub reports: Vec<MetricReport>,
}

/// Full run: train (or reuse checkpoints), sample, score, write everything.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let dir = run_dir(cfg)?;
    create_dir(&dir)?;
    write_file(&dir.join("config.json"), cfg.to_json_pretty()?.as_bytes())?;
    let models = train_or_load(cfg, &dir)?;
    let cells = evaluate(cfg, &models)?;
    write_samples(cfg, &dir, &cells)?;
    write_reports(&dir, &cells)?;
    Ok(Outcome {
        dir,
        config_hash: cfg.config_hash()?,
        reports: cells.into_iter().map(|c| c.report).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::toy(seed);
        cfg.model.hidden_dims = vec![16, 16];
        cfg.model.time_embed_dim = 4;
        cfg.n_train = 256;
        cfg.train.steps = 40;
        cfg.sample.n_samples = 30;
        cfg.sample.step_counts = vec![2, 5];
        cfg.sample.export_trajectories = 4;
        cfg.sample.strategies = vec![ConditionStrategy::PrevStepPred, ConditionStrategy::Zero];
        cfg
    }

    fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn one_row_per_method_and_step_count() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(1);
        cfg.out_dir = tmp.path().to_path_buf();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.reports.len(), 3 * 2);
        let sweep = fs::read_to_string(out.dir.join("sweep.csv")).unwrap();
        assert_eq!(sweep.lines().next().unwrap(), "N_steps,method,ifc,ood_rate,fidelity");
        assert_eq!(sweep.lines().count(), 1 + 6);
        let finals = fs::read_to_string(out.dir.join("finals.csv")).unwrap();
        assert_eq!(finals.lines().count(), 1 + 30 * 3 * 2);
        let log = fs::read_to_string(out.dir.join("train_noncross.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 40);
        let first: StepStats = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);
        for r in &out.reports {
            assert!((0.0..=1.0).contains(&r.ood_rate) && r.fidelity >= 0.0);
            assert_eq!(r.config_hash, out.config_hash);
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny(2);
        cfg.out_dir = a.path().to_path_buf();
        let first = run_experiment(&cfg).unwrap();
        let tree = read_tree(&first.dir);
        // Same directory again: checkpoints are reused, outputs unchanged.
        run_experiment(&cfg).unwrap();
        assert_eq!(read_tree(&first.dir), tree);
        // Fresh directory: everything retrained from scratch. The config
        // and checkpoints record the out_dir they were written under, so
        // checkpoints are compared by content.
        cfg.out_dir = b.path().to_path_buf();
        let second = run_experiment(&cfg).unwrap();
        let located = |p: &Path| p.extension().is_some_and(|e| e == "ckpt") || p == Path::new("config.json");
        let strip = |t: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
            t.into_iter().filter(|(p, _)| !located(p)).collect()
        };
        assert_eq!(strip(read_tree(&second.dir)), strip(tree));
        for role in [Role::Baseline, Role::Noncross] {
            let x = Checkpoint::load(&checkpoint_path(&first.dir, role)).unwrap();
            let y = Checkpoint::load(&checkpoint_path(&second.dir, role)).unwrap();
            assert_eq!(x.trainer, y.trainer);
        }
    }

    #[test]
    fn unwritable_out_dir_is_an_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        let blocker = tmp.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let mut cfg = tiny(3);
        cfg.out_dir = blocker;
        assert!(matches!(run_experiment(&cfg), Err(Error::Io { .. })));
    }

    #[test]
    fn diverged_training_reports_the_step() {
        let mut cfg = tiny(4);
        cfg.train.lr = 1e300;
        match train_models(&cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step < cfg.train.steps),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
