//! Optimization loop over the flattened control parameters.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::ControlGrid;
use crate::data::MixtureDensity;
use crate::dynamics::DynamicsLayer;
use crate::error::{check_len, Error, Result};
use crate::gradients::{cnf_grad, node_grad, EngineConfig, GradientReport};
use crate::integrate::{SolverConfig, TraceProbe};
use crate::io::write_atomic;
use crate::objectives::{tikhonov_with_grad, RegressionLoss};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr > 0.0 && lr.is_finite(),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0
                    && lr.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n: usize) -> Self {
        let moments = if matches!(config, OptimizerConfig::Adam { .. }) { n } else { 0 };
        Self {
            config,
            step: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.config {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => *lr = new_lr,
        }
    }

    /// One update of `params` in place. A non-finite gradient leaves both
    /// state and parameters untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], iteration: usize) -> Result<()> {
        check_len("gradient", params.len(), grad.len())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(iteration));
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                check_len("moment vector", params.len(), self.m.len())?;
                let c1 = 1.0 - beta1.powf(self.step as f64);
                let c2 = 1.0 - beta2.powf(self.step as f64);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    let next = state.step as usize;
    state.step(params, grad, next)
}

/// A per-iteration objective and its gradient.
pub trait TrainingProblem {
    /// Untimed per-iteration setup such as drawing a fresh batch.
    fn prepare(&mut self, _iteration: usize) -> Result<()> {
        Ok(())
    }

    fn evaluate(&self, layer: &DynamicsLayer, grid: &ControlGrid, engine: &EngineConfig) -> Result<GradientReport>;
}

/// Full-batch trajectory regression.
pub struct TimeSeriesProblem {
    pub y0: Vec<f64>,
    pub horizon: f64,
    pub loss: RegressionLoss,
}

impl TrainingProblem for TimeSeriesProblem {
    fn evaluate(&self, layer: &DynamicsLayer, grid: &ControlGrid, engine: &EngineConfig) -> Result<GradientReport> {
        node_grad(layer, grid, &self.y0, self.horizon, &self.loss, engine)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    #[default]
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone)]
pub enum SampleSource {
    Mixture(MixtureDensity),
    /// Rows of a fixed, already standardized dataset.
    Dataset(Array2<f64>),
}

impl SampleSource {
    pub fn features(&self) -> usize {
        match self {
            SampleSource::Mixture(_) => 2,
            SampleSource::Dataset(d) => d.ncols(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        match self {
            SampleSource::Mixture(m) => m.sample_with(n, rng).0,
            SampleSource::Dataset(d) if n >= d.nrows() => d.clone(),
            SampleSource::Dataset(d) => {
                let mut rows = index::sample(rng, d.nrows(), n).into_vec();
                rows.sort_unstable();
                d.select(Axis(0), &rows)
            }
        }
    }
}

/// Negative log-likelihood of a CNF on a fresh batch every iteration.
pub struct CnfProblem {
    pub source: SampleSource,
    pub batch: usize,
    pub horizon: f64,
    pub trace: TraceKind,
    pub seed: u64,
    current: Option<(Array2<f64>, TraceProbe)>,
}

impl CnfProblem {
    pub fn new(source: SampleSource, batch: usize, horizon: f64, trace: TraceKind, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            source,
            batch,
            horizon,
            trace,
            seed,
            current: None,
        })
    }

    /// Batch and probe used by the latest `prepare` call.
    pub fn current(&self) -> Option<&(Array2<f64>, TraceProbe)> {
        self.current.as_ref()
    }
}

impl TrainingProblem for CnfProblem {
    fn prepare(&mut self, iteration: usize) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration as u64 + 1);
        let samples = self.source.draw(self.batch, &mut rng);
        let probe = match self.trace {
            TraceKind::Exact => TraceProbe::Exact,
            TraceKind::Hutchinson => {
                TraceProbe::Hutchinson(Array2::from_shape_fn(samples.dim(), |_| rng.sample(StandardNormal)))
            }
        };
        self.current = Some((samples, probe));
        Ok(())
    }

    fn evaluate(&self, layer: &DynamicsLayer, grid: &ControlGrid, engine: &EngineConfig) -> Result<GradientReport> {
        let (samples, probe) = self
            .current
            .as_ref()
            .ok_or_else(|| Error::Contract("prepare must run before evaluate".into()))?;
        cnf_grad(layer, grid, samples.view(), self.horizon, probe.clone(), engine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    /// Forward evaluations summed over all iterations so far.
    pub nfe_forward: usize,
    pub nfe_backward: usize,
    pub wall_ms: f64,
    pub phase: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halt {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub entries: Vec<LogEntry>,
    pub halted: Option<Halt>,
}

impl ConvergenceLog {
    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn total_nfe_forward(&self) -> usize {
        self.entries.last().map_or(0, |e| e.nfe_forward)
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.entries.iter().map(|e| e.wall_ms).sum()
    }

    pub fn mean_wall_ms(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.total_wall_ms() / self.entries.len() as f64
        }
    }

    /// Forward evaluations per iteration.
    pub fn mean_nfe_forward(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.total_nfe_forward() as f64 / self.entries.len() as f64
        }
    }

    /// First iteration of each phase after the first.
    pub fn phase_starts(&self) -> Vec<usize> {
        self.entries
            .windows(2)
            .filter(|w| w[1].phase != w[0].phase)
            .map(|w| w[1].iteration)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "loss", "nfe_f", "wall_ms", "phase", "nfe_b"])?;
        for e in &self.entries {
            w.write_record([
                e.iteration.to_string(),
                e.loss.to_string(),
                e.nfe_forward.to_string(),
                e.wall_ms.to_string(),
                e.phase.to_string(),
                e.nfe_backward.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_atomic(path, &buf)
    }

    fn push(&mut self, report: &GradientReport, wall_ms: f64, phase: usize) {
        let (f, b) = self.entries.last().map_or((0, 0), |e| (e.nfe_forward, e.nfe_backward));
        self.entries.push(LogEntry {
            iteration: self.entries.len(),
            loss: report.loss,
            nfe_forward: f + report.nfe_forward,
            nfe_backward: b + report.nfe_backward,
            wall_ms,
            phase,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub engine: EngineConfig,
    /// Weight of the time-integrated squared-parameter penalty.
    #[serde(default)]
    pub regularization: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.engine.validate()?;
        if !(self.regularization >= 0.0) {
            return Err(Error::Config("regularization weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub iterations: usize,
    pub solver: SolverConfig,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultilevelSchedule {
    pub phases: Vec<Phase>,
}

impl MultilevelSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("multilevel schedule has no phases".into()));
        }
        for p in &self.phases {
            p.solver.validate()?;
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::Config(format!("phase learning rate {} must be positive", p.lr)));
            }
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }
}

struct Loop<'a, P: TrainingProblem + ?Sized> {
    layer: &'a DynamicsLayer,
    problem: &'a mut P,
    regularization: f64,
    grid: ControlGrid,
    optimizer: OptimizerState,
    log: ConvergenceLog,
}

impl<P: TrainingProblem + ?Sized> Loop<'_, P> {
    fn halt(&mut self, iteration: usize, reason: String) {
        self.log.halted = Some(Halt { iteration, reason });
    }

    fn run(&mut self, engine: &EngineConfig, iterations: usize, phase: usize) -> Result<()> {
        for _ in 0..iterations {
            if self.log.halted.is_some() {
                return Ok(());
            }
            let it = self.log.entries.len();
            self.problem.prepare(it)?;
            let start = Instant::now();
            let mut report = match self.problem.evaluate(self.layer, &self.grid, engine) {
                Ok(r) => r,
                Err(e) if e.is_numerical() => {
                    self.halt(it, e.to_string());
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            let mut grad = report.flat();
            if self.regularization > 0.0 {
                let (r, g) = tikhonov_with_grad(&self.grid, self.regularization);
                report.loss += r;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !report.loss.is_finite() {
                self.log.push(&report, start.elapsed().as_secs_f64() * 1e3, phase);
                self.halt(it, format!("non-finite loss {}", report.loss));
                return Ok(());
            }
            let mut params = self.grid.as_flat().to_vec();
            let stepped = self.optimizer.step(&mut params, &grad, it);
            self.log.push(&report, start.elapsed().as_secs_f64() * 1e3, phase);
            match stepped {
                Ok(()) if params.iter().all(|p| p.is_finite()) => self.grid = self.grid.unflatten(&params)?,
                Ok(()) => self.halt(it, "non-finite parameters after the update".into()),
                Err(e) => self.halt(it, e.to_string()),
            }
        }
        Ok(())
    }
}

/// Runs `config.iterations` optimizer steps from `grid`.
///
/// Numerical failures stop the loop and are recorded in the log; the
/// returned grid holds the last finite parameters.
pub fn train<P: TrainingProblem + ?Sized>(
    config: &TrainConfig,
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    problem: &mut P,
) -> Result<(ControlGrid, ConvergenceLog)> {
    config.validate()?;
    check_len("control layer parameters", layer.n_params(), grid.layer_len())?;
    let mut lp = Loop {
        layer,
        problem,
        regularization: config.regularization,
        grid: grid.clone(),
        optimizer: OptimizerState::new(config.optimizer, grid.flat_len()),
        log: ConvergenceLog::default(),
    };
    lp.run(&config.engine, config.iterations, 0)?;
    Ok((lp.grid, lp.log))
}

/// Runs the phases in order, switching the forward solver and learning rate
/// at each boundary. Parameters and optimizer moments carry over unchanged.
pub fn train_multilevel<P: TrainingProblem + ?Sized>(
    schedule: &MultilevelSchedule,
    config: &TrainConfig,
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    problem: &mut P,
) -> Result<(ControlGrid, ConvergenceLog)> {
    schedule.validate()?;
    config.validate()?;
    check_len("control layer parameters", layer.n_params(), grid.layer_len())?;
    let mut lp = Loop {
        layer,
        problem,
        regularization: config.regularization,
        grid: grid.clone(),
        optimizer: OptimizerState::new(config.optimizer, grid.flat_len()),
        log: ConvergenceLog::default(),
    };
    for (k, phase) in schedule.phases.iter().enumerate() {
        let engine = config.engine.with_forward(phase.solver);
        engine.validate()?;
        lp.optimizer.set_lr(phase.lr);
        lp.run(&engine, phase.iterations, k)?;
    }
    Ok((lp.grid, lp.log))
}
