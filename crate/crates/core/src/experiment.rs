//! Experiment configuration and end-to-end runners shared by the CLI and the acceptance suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::control::{glorot_grid, Checkpoint, ControlGrid, Interpolation};
use crate::data::{generate_timeseries, load_csv, sample_mixture, CsvSchema, MixtureDensity, TimeSeriesConfig};
use crate::diagnostics::inverse_error;
use crate::dynamics::{DynamicsLayer, LayerSpec};
use crate::error::{Error, Result};
use crate::diagnostics::{taylor_check, TaylorCheckResult};
use crate::gradients::{Engine, EngineConfig};
use crate::integrate::{cnf_solve, node_solve, SolverConfig, TraceProbe};
use crate::io::write_atomic;
use crate::objectives::{cnf_nll, Loss};
use crate::train::{
    train, train_multilevel, CnfProblem, ConvergenceLog, MultilevelSchedule, OptimizerConfig, SampleSource,
    TimeSeriesProblem, TraceKind, TrainConfig, TrainingProblem,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Timeseries,
    CnfMixture,
    CnfCsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub has_header: bool,
    /// Rows held out for the test loss, taken from the end of the file.
    #[serde(default = "default_holdout")]
    pub test_fraction: f64,
}

fn default_holdout() -> f64 {
    0.1
}

fn default_control_times() -> Vec<f64> {
    vec![0.0]
}

fn default_batch() -> usize {
    512
}

fn default_test_samples() -> usize {
    5000
}

fn default_test_seed() -> u64 {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub engine: EngineConfig,
    pub network: LayerSpec,
    pub horizon: f64,
    pub optimizer: OptimizerConfig,
    pub iterations: usize,
    /// Seed of the Glorot initialization.
    pub seed: u64,
    #[serde(default = "default_control_times")]
    pub control_times: Vec<f64>,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub regularization: f64,
    #[serde(default)]
    pub multilevel: Option<MultilevelSchedule>,
    #[serde(default)]
    pub timeseries: TimeSeriesConfig,
    #[serde(default)]
    pub mixture: MixtureDensity,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub trace: TraceKind,
    /// Seed of the per-iteration training batches.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_test_seed")]
    pub test_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            optimizer: self.optimizer,
            engine: self.engine,
            regularization: self.regularization,
        }
    }

    /// Solver used for evaluation after training: the last phase's, if any.
    pub fn final_solver(&self) -> SolverConfig {
        self.multilevel
            .as_ref()
            .and_then(|m| m.phases.last())
            .map_or(self.engine.forward, |p| p.solver)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if let Some(m) = &self.multilevel {
            m.validate()?;
            for p in &m.phases {
                self.engine.with_forward(p.solver).validate()?;
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        for solver in self.solvers() {
            if solver.method.is_fixed_step() {
                solver.steps_for(self.horizon)?;
            }
        }
        let layer = DynamicsLayer::from_spec(&self.network)?;
        match self.experiment {
            ExperimentKind::Timeseries => {
                if layer.dim() != 2 {
                    return Err(Error::Config("network.dim must be 2 for the time series".into()));
                }
                if (self.horizon - self.timeseries.horizon).abs() > 1e-12 {
                    return Err(Error::Config("horizon must equal timeseries.horizon".into()));
                }
            }
            ExperimentKind::CnfMixture => {
                if layer.dim() != 2 {
                    return Err(Error::Config("network.dim must be 2 for the mixture".into()));
                }
                MixtureDensity::new(self.mixture.radius, self.mixture.std)?;
            }
            ExperimentKind::CnfCsv => {
                let csv = self
                    .csv
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing field `csv` for a cnf-csv experiment".into()))?;
                if !(0.0..1.0).contains(&csv.test_fraction) {
                    return Err(Error::Config("csv.test_fraction must lie in [0, 1)".into()));
                }
            }
        }
        if self.experiment != ExperimentKind::Timeseries && (self.batch == 0 || self.test_samples == 0) {
            return Err(Error::Config("batch and test_samples must be positive".into()));
        }
        Ok(())
    }

    fn solvers(&self) -> Vec<SolverConfig> {
        let mut out = vec![self.engine.forward];
        if self.engine.engine == Engine::OptDisc {
            out.push(self.engine.backward);
        }
        if let Some(m) = &self.multilevel {
            out.extend(m.phases.iter().map(|p| p.solver));
        }
        out
    }

    pub fn initial_model(&self) -> Result<(DynamicsLayer, ControlGrid)> {
        let layer = DynamicsLayer::from_spec(&self.network)?;
        let grid = glorot_grid(&layer, self.control_times.clone(), self.horizon, self.interpolation, self.seed)?;
        Ok((layer, grid))
    }
}

/// Training and test data of an experiment.
pub enum Prepared {
    Timeseries(TimeSeriesProblem),
    Cnf { problem: CnfProblem, test: Array2<f64> },
}

impl Prepared {
    pub fn problem(&mut self) -> &mut dyn TrainingProblem {
        match self {
            Prepared::Timeseries(p) => p,
            Prepared::Cnf { problem, .. } => problem,
        }
    }

    /// Training objective on the current batch, without its gradient.
    pub fn loss(&self, layer: &DynamicsLayer, grid: &ControlGrid, solver: &SolverConfig) -> Result<f64> {
        match self {
            Prepared::Timeseries(p) => {
                let rec = node_solve(layer, grid, &p.y0, p.horizon, solver, p.loss.times())?;
                p.loss.value(&rec.outputs)
            }
            Prepared::Cnf { problem, .. } => {
                let (samples, probe) = problem
                    .current()
                    .ok_or_else(|| Error::Contract("prepare must run before loss".into()))?;
                cnf_nll(&cnf_solve(layer, grid, samples.view(), problem.horizon, solver, probe.clone())?)
            }
        }
    }

    pub fn test_set(&self) -> Option<&Array2<f64>> {
        match self {
            Prepared::Cnf { test, .. } => Some(test),
            Prepared::Timeseries(_) => None,
        }
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    match config.experiment {
        ExperimentKind::Timeseries => {
            let data = generate_timeseries(&config.timeseries)?;
            Ok(Prepared::Timeseries(TimeSeriesProblem {
                y0: data.targets[0].clone(),
                horizon: config.horizon,
                loss: data.loss()?,
            }))
        }
        ExperimentKind::CnfMixture => {
            let problem = CnfProblem::new(
                SampleSource::Mixture(config.mixture),
                config.batch,
                config.horizon,
                config.trace,
                config.data_seed,
            )?;
            let test = sample_mixture(&config.mixture, config.test_samples, config.test_seed);
            Ok(Prepared::Cnf { problem, test })
        }
        ExperimentKind::CnfCsv => {
            let src = config.csv.as_ref().expect("validated");
            let data = load_csv(&src.path, CsvSchema { has_header: src.has_header })?;
            let n = data.samples.nrows();
            let n_test = ((n as f64 * src.test_fraction).round() as usize).min(n.saturating_sub(1));
            let (train_rows, test_rows) = data.samples.view().split_at(ndarray::Axis(0), n - n_test);
            let test = if n_test == 0 { train_rows.to_owned() } else { test_rows.to_owned() };
            let problem = CnfProblem::new(
                SampleSource::Dataset(train_rows.to_owned()),
                config.batch,
                config.horizon,
                config.trace,
                config.data_seed,
            )?;
            Ok(Prepared::Cnf { problem, test })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub mean_iteration_ms: f64,
}

/// Table-style summary of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub engine: String,
    pub iterations_run: usize,
    pub initial_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    /// Test NLL for flows, full regression loss for the time series.
    pub test_loss: f64,
    pub inverse_error: Option<f64>,
    pub total_nfe_forward: usize,
    pub mean_nfe_forward: f64,
    pub halted: Option<String>,
    pub timing: Timing,
    pub config: ExperimentConfig,
}

pub struct Outcome {
    pub layer: DynamicsLayer,
    pub grid: ControlGrid,
    pub log: ConvergenceLog,
    pub summary: Summary,
}

impl Outcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(&self.layer, &self.grid, Some(serde_json::to_value(&self.summary.config)?)))
    }

    /// Writes `checkpoint.json`, `convergence.csv` and `summary.json` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        self.checkpoint()?.save(&dir.join("checkpoint.json"))?;
        self.log.save_csv(&dir.join("convergence.csv"))?;
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?.as_bytes())
    }
}

/// Test loss and inverse error of a model under `solver`.
pub fn evaluate(
    config: &ExperimentConfig,
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    prepared: &Prepared,
    solver: &SolverConfig,
) -> Result<(f64, Option<f64>)> {
    match prepared {
        Prepared::Timeseries(p) => {
            let rec = node_solve(layer, grid, &p.y0, config.horizon, solver, p.loss.times())?;
            Ok((p.loss.value(&rec.outputs)?, None))
        }
        Prepared::Cnf { test, .. } => {
            let rec = cnf_solve(layer, grid, test.view(), config.horizon, solver, TraceProbe::Exact)?;
            let inv = inverse_error(layer, grid, test.view(), config.horizon, solver, solver)?;
            Ok((cnf_nll(&rec)?, Some(inv.mean)))
        }
    }
}

/// Taylor remainders of the training objective at `grid`, using the batch of `iteration`.
pub fn gradcheck(
    config: &ExperimentConfig,
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    iteration: usize,
    direction_seed: u64,
    steps: &[f64],
) -> Result<TaylorCheckResult> {
    let mut prepared = prepare(config)?;
    prepared.problem().prepare(iteration)?;
    let report = prepared.problem().evaluate(layer, grid, &config.engine)?;
    let grad: Vec<f64> = report.grad.concat();
    let v = crate::diagnostics::random_direction(grad.len(), direction_seed);
    let solver = config.engine.forward;
    taylor_check(
        |p| prepared.loss(layer, &grid.unflatten(p)?, &solver),
        grid.as_flat(),
        &grad,
        &v,
        steps,
    )
}

/// Trains from the seeded initialization, then evaluates on the test data.
pub fn run(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    let (layer, grid) = config.initial_model()?;
    run_from(config, &layer, &grid)
}

pub fn run_from(config: &ExperimentConfig, layer: &DynamicsLayer, grid: &ControlGrid) -> Result<Outcome> {
    let mut prepared = prepare(config)?;
    let start = Instant::now();
    let (grid, log) = match &config.multilevel {
        Some(schedule) => train_multilevel(schedule, &config.train_config(), layer, grid, prepared.problem())?,
        None => train(&config.train_config(), layer, grid, prepared.problem())?,
    };
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    let (test_loss, inv) = match evaluate(config, layer, &grid, &prepared, &config.final_solver()) {
        Ok(v) => v,
        Err(e) if e.is_numerical() => (f64::NAN, None),
        Err(e) => return Err(e),
    };
    let losses = log.losses();
    let summary = Summary {
        experiment: config.experiment,
        engine: config.engine.engine.label().into(),
        iterations_run: log.entries.len(),
        initial_loss: losses.first().copied(),
        final_train_loss: losses.last().copied(),
        test_loss,
        inverse_error: inv,
        total_nfe_forward: log.total_nfe_forward(),
        mean_nfe_forward: log.mean_nfe_forward(),
        halted: log.halted.as_ref().map(|h| format!("iteration {}: {}", h.iteration, h.reason)),
        timing: Timing {
            total_ms,
            mean_iteration_ms: log.mean_wall_ms(),
        },
        config: config.clone(),
    };
    Ok(Outcome {
        layer: layer.clone(),
        grid,
        log,
        summary,
    })
}

/// The time-series setup: cubic-mlp, 300 ADAM steps at 0.1, rk4 at the data spacing.
pub fn timeseries_preset() -> ExperimentConfig {
    let ts = TimeSeriesConfig::default();
    ExperimentConfig {
        experiment: ExperimentKind::Timeseries,
        engine: EngineConfig::disc_opt(SolverConfig::rk4(ts.horizon / (ts.points - 1) as f64)),
        network: LayerSpec::CubicMlp { dim: 2, hidden: 50 },
        horizon: ts.horizon,
        optimizer: OptimizerConfig::adam(0.1),
        iterations: 300,
        seed: 0,
        control_times: default_control_times(),
        interpolation: Interpolation::Constant,
        regularization: 0.0,
        multilevel: None,
        timeseries: ts,
        mixture: MixtureDensity::default(),
        csv: None,
        batch: default_batch(),
        trace: TraceKind::Exact,
        data_seed: 0,
        test_samples: default_test_samples(),
        test_seed: default_test_seed(),
        output_dir: None,
    }
}

/// The mixture flow: four concatsquash layers of width 64, one control layer, rk4 h = 0.05 on [0, 0.5].
pub fn mixture_preset() -> ExperimentConfig {
    use crate::dynamics::{Activation, ConcatsquashShape};
    ExperimentConfig {
        experiment: ExperimentKind::CnfMixture,
        engine: EngineConfig::disc_opt(SolverConfig::rk4(0.05)),
        network: LayerSpec::ConcatsquashStack(ConcatsquashShape {
            dim: 2,
            hidden: 64,
            hidden_layers: 3,
            flow_steps: 1,
            gate: Activation::Tanh,
            activation: Activation::Tanh,
        }),
        horizon: 0.5,
        optimizer: OptimizerConfig::adam(1e-3),
        iterations: 3000,
        seed: 0,
        control_times: default_control_times(),
        interpolation: Interpolation::Linear,
        regularization: 0.0,
        multilevel: None,
        timeseries: TimeSeriesConfig::default(),
        mixture: MixtureDensity::default(),
        csv: None,
        batch: default_batch(),
        trace: TraceKind::Exact,
        data_seed: 0,
        test_samples: default_test_samples(),
        test_seed: default_test_seed(),
        output_dir: None,
    }
}
