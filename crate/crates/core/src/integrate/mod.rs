//! Explicit Runge–Kutta integrators with stage recording, plus the batched
//! state and CNF systems they are run on.

mod dopri5;
mod rk;
mod systems;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::control::ControlGrid;
use crate::dynamics::DynamicsLayer;
use crate::error::{check_len, Error, Result};

pub use dopri5::Dopri5Stats;
pub(crate) use dopri5::{dopri5, Dopri5Options};
pub(crate) use rk::{fixed_steps, Tableau};
pub use systems::{CnfSystem, NodeSystem, TraceProbe};

pub const DEFAULT_RTOL: f64 = 1e-7;
pub const DEFAULT_ATOL: f64 = 1e-9;
pub const DEFAULT_MAX_STEPS: usize = 100_000;

/// Relative slack allowed when matching `T/h` to an integer or a target time to a step.
pub const GRID_TOLERANCE: f64 = 1e-9;

/// A right-hand side `dx/dt = f(t, x)` on a flat state vector.
pub trait OdeSystem: Sync {
    fn len(&self) -> usize;
    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]);
}

/// A system that can also pull cotangents back through its right-hand side.
pub trait AdjointSystem: OdeSystem {
    /// Length of the flat control-parameter gradient.
    fn n_grad(&self) -> usize;

    /// Accumulates `(∂f/∂x)ᵀ v` into `x_bar` and `(∂f/∂θ)ᵀ v`, mapped onto the
    /// control layers, into `grad`.
    fn vjp(&self, t: f64, x: &[f64], v: &[f64], x_bar: &mut [f64], grad: &mut [f64]);

    /// `rhs` and `vjp` at the same point; systems may share the forward pass.
    fn rhs_vjp(&self, t: f64, x: &[f64], v: &[f64], dx: &mut [f64], x_bar: &mut [f64], grad: &mut [f64]) {
        self.rhs(t, x, dx);
        self.vjp(t, x, v, x_bar, grad);
    }

    /// `rhs` that also returns whatever a later `vjp_cached` at the same
    /// point can reuse.
    fn rhs_cached(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Option<EvalCache> {
        self.rhs(t, x, dx);
        None
    }

    fn vjp_cached(&self, cache: Option<&EvalCache>, t: f64, x: &[f64], v: &[f64], x_bar: &mut [f64], grad: &mut [f64]) {
        let _ = cache;
        self.vjp(t, x, v, x_bar, grad);
    }
}

/// Opaque intermediates of one right-hand-side evaluation.
pub type EvalCache = Box<dyn std::any::Any + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn is_fixed_step(self) -> bool {
        !matches!(self, Method::Dopri5)
    }

    pub(crate) fn tableau(self) -> Option<&'static Tableau> {
        match self {
            Method::Euler => Some(&rk::EULER),
            Method::Rk4 => Some(&rk::RK4),
            Method::Dopri5 => None,
        }
    }
}

fn default_rtol() -> f64 {
    DEFAULT_RTOL
}
fn default_atol() -> f64 {
    DEFAULT_ATOL
}
fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Step size for the fixed-step methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

impl SolverConfig {
    pub fn euler(h: f64) -> Self {
        Self::fixed(Method::Euler, h)
    }

    pub fn rk4(h: f64) -> Self {
        Self::fixed(Method::Rk4, h)
    }

    pub(crate) fn fixed(method: Method, h: f64) -> Self {
        Self {
            method,
            step: Some(h),
            rtol: DEFAULT_RTOL,
            atol: DEFAULT_ATOL,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            step: None,
            rtol,
            atol,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.is_fixed_step() {
            match self.step {
                Some(h) if h > 0.0 && h.is_finite() => {}
                Some(h) => return Err(Error::Config(format!("solver.step must be positive, got {h}"))),
                None => {
                    return Err(Error::Config(format!(
                        "solver.step is required for method {:?}",
                        self.method
                    )))
                }
            }
        } else if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!(
                "solver.rtol and solver.atol must be positive, got {} and {}",
                self.rtol, self.atol
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("solver.max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Number of fixed steps covering `span`; rejects step sizes that do not divide it.
    pub fn steps_for(&self, span: f64) -> Result<usize> {
        self.validate()?;
        let h = self.step.ok_or_else(|| Error::Config("adaptive solver has no step count".into()))?;
        let span = span.abs();
        let n = (span / h).round();
        if n < 1.0 || (n * h - span).abs() > GRID_TOLERANCE * span {
            return Err(Error::Config(format!(
                "solver.step {h} does not divide the horizon {span} into whole steps"
            )));
        }
        if n as usize > self.max_steps {
            return Err(Error::MaxSteps(self.max_steps));
        }
        Ok(n as usize)
    }

    /// Short label such as `rk4 h=0.05` or `dopri5 rtol=1e-7`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Euler => format!("euler h={}", self.step.unwrap_or(f64::NAN)),
            Method::Rk4 => format!("rk4 h={}", self.step.unwrap_or(f64::NAN)),
            Method::Dopri5 => format!("dopri5 rtol={:e} atol={:e}", self.rtol, self.atol),
        }
    }
}

/// How the flat state splits into samples, features and the log-density channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub batch: usize,
    pub features: usize,
    pub log_density: bool,
}

impl StateLayout {
    pub fn plain(len: usize) -> Self {
        Self {
            batch: 1,
            features: len,
            log_density: false,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * (self.features + usize::from(self.log_density))
    }
}

/// Stage inputs `X_i` and stage derivatives `K_i = f(t + c_i h, X_i)` of one step
/// starting at `t` with signed step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStages {
    pub t: f64,
    pub h: f64,
    pub inputs: Vec<Vec<f64>>,
    pub derivs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveRecord {
    pub method: Method,
    pub layout: StateLayout,
    /// Accepted step endpoints, starting at the initial time.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Per-step stages; fixed-step methods only.
    pub stages: Vec<StepStages>,
    /// `f(t_j, x_j)` at every accepted point; adaptive method only.
    pub slopes: Vec<Vec<f64>>,
    pub output_times: Vec<f64>,
    pub outputs: Vec<Vec<f64>>,
    /// For fixed-step records, the step index each output coincides with.
    pub output_steps: Vec<usize>,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl SolveRecord {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("record holds the initial state")
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Terminal features as a `batch x features` matrix.
    pub fn final_features(&self) -> Array2<f64> {
        let l = self.layout;
        let x = self.final_state();
        Array2::from_shape_vec((l.batch, l.features), x[..l.batch * l.features].to_vec()).expect("layout")
    }

    /// Terminal log-density channel, one value per sample.
    pub fn final_log_density(&self) -> Option<&[f64]> {
        let l = self.layout;
        l.log_density.then(|| &self.final_state()[l.batch * l.features..])
    }

    /// Recomputes every step update from the recorded stage derivatives.
    pub fn replay(&self) -> Result<Vec<f64>> {
        let tab = self
            .method
            .tableau()
            .ok_or_else(|| Error::Contract("replay needs a fixed-step record".into()))?;
        if self.stages.len() != self.steps() {
            return Err(Error::Contract("record has no stored stages".into()));
        }
        let mut x = self.states[0].clone();
        let mut next = vec![0.0; x.len()];
        for st in &self.stages {
            rk::combine(&x, st.h, tab.b, &st.derivs, &mut next);
            std::mem::swap(&mut x, &mut next);
        }
        Ok(x)
    }

    /// Long-format CSV: `t`, optional `sample`, feature columns, optional `g`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let l = self.layout;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        if l.batch > 1 {
            header.push("sample".into());
        }
        header.extend((0..l.features).map(|i| format!("y{i}")));
        if l.log_density {
            header.push("g".into());
        }
        w.write_record(&header)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            for b in 0..l.batch {
                let mut row = vec![format!("{t:e}")];
                if l.batch > 1 {
                    row.push(b.to_string());
                }
                row.extend(x[b * l.features..(b + 1) * l.features].iter().map(|v| format!("{v:e}")));
                if l.log_density {
                    row.push(format!("{:e}", x[l.batch * l.features + b]));
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }
}

/// Finds the step index whose time matches `t`.
pub(crate) fn match_step(times: &[f64], t: f64) -> Option<usize> {
    let span = (times[times.len() - 1] - times[0]).abs().max(1.0);
    let (mut best, mut dist) = (0, f64::INFINITY);
    for (j, s) in times.iter().enumerate() {
        let d = (s - t).abs();
        if d < dist {
            best = j;
            dist = d;
        }
    }
    (dist <= GRID_TOLERANCE * span).then_some(best)
}

/// Integrates `sys` from `t0` to `t1` (either direction) and reports the state at `output_times`.
pub fn solve<S: OdeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    t0: f64,
    t1: f64,
    config: &SolverConfig,
    output_times: &[f64],
    layout: StateLayout,
) -> Result<SolveRecord> {
    check_len("initial state", sys.len(), x0.len())?;
    config.validate()?;
    let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
    let slack = GRID_TOLERANCE * (hi - lo).abs().max(1.0);
    if let Some(&t) = output_times.iter().find(|&&t| t < lo - slack || t > hi + slack) {
        return Err(Error::Contract(format!("output time {t} outside the solve span [{lo}, {hi}]")));
    }
    let mut f = |t: f64, x: &[f64], dx: &mut [f64]| sys.rhs(t, x, dx);
    match config.method.tableau() {
        Some(tab) => {
            let n = config.steps_for(t1 - t0)?;
            let run = fixed_steps(&mut f, tab, x0, t0, t1, n, true)?;
            let mut output_steps = Vec::with_capacity(output_times.len());
            for &t in output_times {
                let j = match_step(&run.times, t).ok_or_else(|| {
                    Error::Contract(format!("output time {t} is not a step of the {} grid", config.label()))
                })?;
                output_steps.push(j);
            }
            let outputs = output_steps.iter().map(|&j| run.states[j].clone()).collect();
            Ok(SolveRecord {
                method: config.method,
                layout,
                nfe: tab.stages() * n,
                accepted: n,
                rejected: 0,
                times: run.times,
                states: run.states,
                stages: run.stages,
                slopes: Vec::new(),
                output_times: output_times.to_vec(),
                outputs,
                output_steps,
            })
        }
        None => {
            let opts = Dopri5Options {
                rtol: config.rtol,
                atol: config.atol,
                max_steps: config.max_steps,
                keep_trajectory: true,
            };
            let run = dopri5(&mut f, x0, t0, t1, &opts, output_times)?;
            Ok(SolveRecord {
                method: config.method,
                layout,
                times: run.times,
                states: run.states,
                stages: Vec::new(),
                slopes: run.slopes,
                output_times: output_times.to_vec(),
                outputs: run.outputs,
                output_steps: Vec::new(),
                nfe: run.stats.nfe,
                accepted: run.stats.accepted,
                rejected: run.stats.rejected,
            })
        }
    }
}

/// Fixed-step solve that also keeps the evaluation cache of every stage,
/// in step-major order.
pub(crate) fn solve_cached<S: AdjointSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    t1: f64,
    config: &SolverConfig,
    output_times: &[f64],
    layout: StateLayout,
) -> Result<(SolveRecord, Vec<Option<EvalCache>>)> {
    let tab = config
        .method
        .tableau()
        .ok_or_else(|| Error::Config(format!("{} is not a fixed-step method", config.label())))?;
    check_len("initial state", sys.len(), x0.len())?;
    config.validate()?;
    let n = config.steps_for(t1)?;
    let mut caches = Vec::with_capacity(n * tab.stages());
    let mut f = |t: f64, x: &[f64], dx: &mut [f64]| caches.push(sys.rhs_cached(t, x, dx));
    let run = fixed_steps(&mut f, tab, x0, 0.0, t1, n, true)?;
    let mut output_steps = Vec::with_capacity(output_times.len());
    for &t in output_times {
        let j = match_step(&run.times, t).ok_or_else(|| {
            Error::Contract(format!("output time {t} is not a step of the {} grid", config.label()))
        })?;
        output_steps.push(j);
    }
    let outputs = output_steps.iter().map(|&j| run.states[j].clone()).collect();
    let record = SolveRecord {
        method: config.method,
        layout,
        nfe: tab.stages() * n,
        accepted: n,
        rejected: 0,
        times: run.times,
        states: run.states,
        stages: run.stages,
        slopes: Vec::new(),
        output_times: output_times.to_vec(),
        outputs,
        output_steps,
    };
    Ok((record, caches))
}

pub(crate) fn check_horizon(horizon: f64, grid: &ControlGrid) -> Result<()> {
    if !(horizon > 0.0) || horizon > grid.horizon() * (1.0 + GRID_TOLERANCE) {
        return Err(Error::Contract(format!(
            "horizon {horizon} must lie in (0, {}] of the control grid",
            grid.horizon()
        )));
    }
    Ok(())
}

/// Solves `dy/dt = ℓ(θ(t), y, t)` for a single state vector on `[0, T]`.
pub fn node_solve(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y0: &[f64],
    horizon: f64,
    config: &SolverConfig,
    output_times: &[f64],
) -> Result<SolveRecord> {
    check_horizon(horizon, grid)?;
    let sys = NodeSystem::new(layer, grid, 1)?;
    solve(&sys, y0, 0.0, horizon, config, output_times, sys.layout())
}

pub fn euler_solve(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y0: &[f64],
    horizon: f64,
    h: f64,
) -> Result<SolveRecord> {
    node_solve(layer, grid, y0, horizon, &SolverConfig::euler(h), &[])
}

pub fn rk4_solve(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y0: &[f64],
    horizon: f64,
    h: f64,
) -> Result<SolveRecord> {
    node_solve(layer, grid, y0, horizon, &SolverConfig::rk4(h), &[])
}

pub fn dopri5_solve(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y0: &[f64],
    horizon: f64,
    rtol: f64,
    atol: f64,
) -> Result<SolveRecord> {
    node_solve(layer, grid, y0, horizon, &SolverConfig::dopri5(rtol, atol), &[])
}

/// Integrates the augmented state `(y, g)` with `g' = -tr ∇_y ℓ`, `g(0) = 0`,
/// for a batch of samples (rows of `y0`) solved jointly.
pub fn cnf_solve(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y0: ArrayView2<'_, f64>,
    horizon: f64,
    config: &SolverConfig,
    probe: TraceProbe,
) -> Result<SolveRecord> {
    check_horizon(horizon, grid)?;
    let sys = CnfSystem::new(layer, grid, y0.nrows(), probe)?;
    check_len("sample features", layer.dim(), y0.ncols())?;
    let mut x0: Vec<f64> = y0.iter().copied().collect();
    x0.resize(sys.len(), 0.0);
    solve(&sys, &x0, 0.0, horizon, config, &[horizon], sys.layout())
}

/// Integrates `dy/dt = ℓ` from 0 to `T`, batched over the rows of `y0`.
pub fn flow_batch(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y0: ArrayView2<'_, f64>,
    horizon: f64,
    config: &SolverConfig,
) -> Result<(Array2<f64>, usize)> {
    check_horizon(horizon, grid)?;
    check_len("sample features", layer.dim(), y0.ncols())?;
    let sys = NodeSystem::new(layer, grid, y0.nrows())?;
    let x: Vec<f64> = y0.iter().copied().collect();
    let rec = solve(&sys, &x, 0.0, horizon, config, &[], sys.layout())?;
    Ok((rec.final_features(), rec.nfe))
}

/// Integrates `dy/dt = ℓ` from `T` back to 0, batched over the rows of `y_t`.
pub fn inverse_solve_batch(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y_t: ArrayView2<'_, f64>,
    horizon: f64,
    config: &SolverConfig,
) -> Result<(Array2<f64>, usize)> {
    check_horizon(horizon, grid)?;
    check_len("sample features", layer.dim(), y_t.ncols())?;
    let sys = NodeSystem::new(layer, grid, y_t.nrows())?;
    let x: Vec<f64> = y_t.iter().copied().collect();
    let rec = solve(&sys, &x, horizon, 0.0, config, &[], sys.layout())?;
    Ok((rec.final_features(), rec.nfe))
}

pub fn inverse_solve(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y_t: &[f64],
    horizon: f64,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    check_len("state", layer.dim(), y_t.len())?;
    let view = ArrayView2::from_shape((1, y_t.len()), y_t).expect("row");
    let (y0, _) = inverse_solve_batch(layer, grid, view, horizon, config)?;
    Ok(y0.into_raw_vec_and_offset().0)
}
