//! Gradient engines: exact reverse of a fixed-step solve (Disc-Opt), the
//! continuous adjoint solved backward in time (Opt-Disc), and the shifted
//! backward-Euler adjoint.

use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::control::ControlGrid;
use crate::dynamics::DynamicsLayer;
use crate::error::{check_len, Error, Result};
use crate::integrate::{
    self, dopri5, fixed_steps, AdjointSystem, EvalCache, CnfSystem, Dopri5Options, Method, NodeSystem, OdeSystem,
    SolveRecord, SolverConfig, StateLayout, TraceProbe,
};
use crate::objectives::{CnfNll, Loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    DiscOpt,
    OptDisc,
    BackwardEulerAdjoint,
}

impl Engine {
    pub fn label(self) -> &'static str {
        match self {
            Engine::DiscOpt => "disc-opt",
            Engine::OptDisc => "opt-disc",
            Engine::BackwardEulerAdjoint => "backward-euler-adjoint",
        }
    }
}

/// How Opt-Disc obtains `y(t)` during the backward sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjointMode {
    /// Integrate the state ODE backward alongside the adjoint.
    #[default]
    Recompute,
    /// Cubic Hermite interpolation of the stored forward trajectory.
    Stored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub engine: Engine,
    pub loss: f64,
    pub control_times: Vec<f64>,
    /// One gradient vector per control layer.
    pub grad: Vec<Vec<f64>>,
    pub nfe_forward: usize,
    pub nfe_backward: usize,
}

impl GradientReport {
    fn new(engine: Engine, loss: f64, grid: &ControlGrid, flat: Vec<f64>, nfe_forward: usize, nfe_backward: usize) -> Self {
        let n = grid.layer_len();
        Self {
            engine,
            loss,
            control_times: grid.times().to_vec(),
            grad: flat.chunks(n).map(<[f64]>::to_vec).collect(),
            nfe_forward,
            nfe_backward,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.grad.concat()
    }

    pub fn norm(&self) -> f64 {
        self.grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Cotangent injected at each step endpoint of a fixed-step record.
fn step_cotangents(record: &SolveRecord, cots: Vec<Vec<f64>>) -> Result<Vec<Option<Vec<f64>>>> {
    let mut per_step: Vec<Option<Vec<f64>>> = vec![None; record.times.len()];
    check_len("output steps", cots.len(), record.output_steps.len())?;
    for (j, c) in record.output_steps.iter().zip(cots) {
        match &mut per_step[*j] {
            Some(acc) => add_into(acc, &c),
            slot => *slot = Some(c),
        }
    }
    Ok(per_step)
}

fn loss_on_record(record: &SolveRecord, loss: &dyn Loss) -> Result<(f64, Vec<Vec<f64>>)> {
    if record.output_times.len() != loss.times().len() {
        return Err(Error::Contract("record was not solved at the loss output times".into()));
    }
    loss.value_and_cotangents(&record.outputs)
}

/// Reverse sweep through the recorded stages of a fixed-step solve.
///
/// Returns the flat control gradient, the cotangent of the initial state and
/// the number of VJP evaluations.
pub fn discopt_backward<S: AdjointSystem + ?Sized>(
    sys: &S,
    record: &SolveRecord,
    cots: Vec<Vec<f64>>,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    discopt_reverse(sys, record, cots, None)
}

fn discopt_reverse<S: AdjointSystem + ?Sized>(
    sys: &S,
    record: &SolveRecord,
    cots: Vec<Vec<f64>>,
    caches: Option<&[Option<EvalCache>]>,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let tab = record
        .method
        .tableau()
        .ok_or_else(|| Error::Contract("Disc-Opt needs a fixed-step record".into()))?;
    if record.stages.len() != record.steps() {
        return Err(Error::Contract("record lacks the stored stages Disc-Opt needs".into()));
    }
    check_len("record state", sys.len(), record.states[0].len())?;
    let per_step = step_cotangents(record, cots)?;
    let s = tab.stages();
    let n = sys.len();
    let mut grad = vec![0.0; sys.n_grad()];
    let mut x_bar = per_step[record.steps()].clone().unwrap_or_else(|| vec![0.0; n]);
    let mut nfe = 0;
    for (step, st) in record.stages.iter().enumerate().rev() {
        let h = st.h;
        let mut k_bar: Vec<Vec<f64>> = tab.b.iter().map(|b| x_bar.iter().map(|v| h * b * v).collect()).collect();
        let mut prev = x_bar.clone();
        for i in (0..s).rev() {
            if k_bar[i].iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut xi_bar = vec![0.0; n];
            let cache = caches.and_then(|c| c.get(step * s + i)).and_then(Option::as_ref);
            sys.vjp_cached(cache, st.t + tab.c[i] * h, &st.inputs[i], &k_bar[i], &mut xi_bar, &mut grad);
            nfe += 1;
            add_into(&mut prev, &xi_bar);
            for (j, a) in tab.a[i].iter().enumerate() {
                if *a != 0.0 {
                    for (kb, xb) in k_bar[j].iter_mut().zip(&xi_bar) {
                        *kb += h * a * xb;
                    }
                }
            }
        }
        if let Some(c) = &per_step[step] {
            add_into(&mut prev, c);
        }
        x_bar = prev;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(0));
    }
    Ok((grad, x_bar, nfe))
}

/// Disc-Opt gradient of `loss` for a single-trajectory record of `layer` on `grid`.
pub fn discopt_grad(
    record: &SolveRecord,
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    loss: &dyn Loss,
) -> Result<GradientReport> {
    let sys = NodeSystem::new(layer, grid, record.layout.batch)?;
    discopt_grad_system(&sys, record, grid, loss)
}

pub fn discopt_grad_system<S: AdjointSystem + ?Sized>(
    sys: &S,
    record: &SolveRecord,
    grid: &ControlGrid,
    loss: &dyn Loss,
) -> Result<GradientReport> {
    let (value, cots) = loss_on_record(record, loss)?;
    let (grad, _, nfe_b) = discopt_backward(sys, record, cots)?;
    Ok(GradientReport::new(Engine::DiscOpt, value, grid, grad, record.nfe, nfe_b))
}

/// Fixed-step forward solve from `t = 0` followed by the Disc-Opt reverse
/// sweep, reusing the intermediates of every forward stage.
pub fn discopt_solve_grad<S: AdjointSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    horizon: f64,
    grid: &ControlGrid,
    loss: &dyn Loss,
    forward: &SolverConfig,
    layout: StateLayout,
) -> Result<GradientReport> {
    let (record, caches) = integrate::solve_cached(sys, x0, horizon, forward, loss.times(), layout)?;
    let (value, cots) = loss_on_record(&record, loss)?;
    let (grad, _, nfe_b) = discopt_reverse(sys, &record, cots, Some(&caches))?;
    Ok(GradientReport::new(Engine::DiscOpt, value, grid, grad, record.nfe, nfe_b))
}

/// Shifted backward-Euler adjoint: `∇_y ℓ` and the running-loss gradient are
/// taken at `j+1`, the parameter term at `j`.
pub fn backward_euler_adjoint_grad(
    record: &SolveRecord,
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    loss: &dyn Loss,
) -> Result<GradientReport> {
    if record.method != Method::Euler {
        return Err(Error::Contract("the backward-Euler adjoint needs a forward-Euler record".into()));
    }
    if record.stages.len() != record.steps() {
        return Err(Error::Contract("record lacks stored stages".into()));
    }
    let sys = NodeSystem::new(layer, grid, record.layout.batch)?;
    let (value, cots) = loss_on_record(record, loss)?;
    let per_step = step_cotangents(record, cots)?;
    let n = sys.len();
    let big_n = record.steps();
    let mut grad = vec![0.0; sys.n_grad()];
    let mut scratch_grad = vec![0.0; sys.n_grad()];
    let mut z = per_step[big_n].clone().unwrap_or_else(|| vec![0.0; n]);
    let mut nfe = 0;
    for j in (0..big_n).rev() {
        let st = &record.stages[j];
        let h = st.h;
        let hz: Vec<f64> = z.iter().map(|v| h * v).collect();
        let mut x_bar = vec![0.0; n];
        sys.vjp(record.times[j + 1], &record.states[j + 1], &hz, &mut x_bar, &mut scratch_grad);
        add_into(&mut z, &x_bar);
        if j + 1 < big_n {
            if let Some(c) = &per_step[j + 1] {
                add_into(&mut z, c);
            }
        }
        let hz: Vec<f64> = z.iter().map(|v| h * v).collect();
        let mut unused = vec![0.0; n];
        sys.vjp(st.t, &record.states[j], &hz, &mut unused, &mut grad);
        nfe += 2;
    }
    Ok(GradientReport::new(Engine::BackwardEulerAdjoint, value, grid, grad, record.nfe, nfe))
}

/// Cubic Hermite interpolation of a stored forward trajectory.
struct StoredTrajectory<'a> {
    times: &'a [f64],
    states: &'a [Vec<f64>],
    slopes: Vec<Vec<f64>>,
}

impl StoredTrajectory<'_> {
    fn eval(&self, t: f64, out: &mut [f64]) {
        let last = self.times.len() - 1;
        let i = self.times.partition_point(|&s| s <= t).clamp(1, last) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (y0, y1) = (&self.states[i], &self.states[i + 1]);
        let (m0, m1) = (&self.slopes[i], &self.slopes[i + 1]);
        for k in 0..out.len() {
            out[k] = h00 * y0[k] + h10 * h * m0[k] + h01 * y1[k] + h11 * h * m1[k];
        }
    }
}

/// Integrates `f` from `t0` to `t1` with `config`; fixed-step methods use the
/// nearest whole number of steps. Returns the end state and the evaluation count.
fn integrate_segment(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    x: &[f64],
    t0: f64,
    t1: f64,
    config: &SolverConfig,
) -> Result<(Vec<f64>, usize)> {
    if t0 == t1 {
        return Ok((x.to_vec(), 0));
    }
    match config.method.tableau() {
        Some(tab) => {
            let h = config.step.unwrap_or(f64::NAN);
            let n = ((t1 - t0).abs() / h).round().max(1.0) as usize;
            let run = fixed_steps(f, tab, x, t0, t1, n, false)?;
            Ok((run.states.last().expect("end state").clone(), n * tab.stages()))
        }
        None => {
            let opts = Dopri5Options {
                rtol: config.rtol,
                atol: config.atol,
                max_steps: config.max_steps,
                keep_trajectory: false,
            };
            let run = dopri5(f, x, t0, t1, &opts, &[])?;
            Ok((run.states.last().expect("end state").clone(), run.stats.nfe))
        }
    }
}

/// Opt-Disc gradient for any adjoint-capable system: forward solve with
/// `forward`, then the adjoint `ż = −(∂f/∂x)ᵀ z`, `ṗ = −(∂f/∂θ)ᵀ z` backward
/// from `T` with `backward`, jumping `z` by the loss cotangent at each output time.
pub fn optdisc_grad_system<S: AdjointSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    horizon: f64,
    grid: &ControlGrid,
    loss: &dyn Loss,
    forward: &SolverConfig,
    backward: &SolverConfig,
    mode: AdjointMode,
    layout: StateLayout,
) -> Result<GradientReport> {
    backward.validate()?;
    let record = integrate::solve(sys, x0, 0.0, horizon, forward, loss.times(), layout)?;
    let (value, cots) = loss.value_and_cotangents(&record.outputs)?;
    let (grad, nfe_b) = adjoint_sweep(sys, &record, cots, horizon, backward, mode)
        .map_err(|e| if e.is_numerical() { Error::AdjointInstability(Box::new(e)) } else { e })?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::AdjointInstability(Box::new(Error::NonFiniteGradient(0))));
    }
    Ok(GradientReport::new(Engine::OptDisc, value, grid, grad, record.nfe, nfe_b))
}

fn adjoint_sweep<S: AdjointSystem + ?Sized>(
    sys: &S,
    record: &SolveRecord,
    cots: Vec<Vec<f64>>,
    horizon: f64,
    backward: &SolverConfig,
    mode: AdjointMode,
) -> Result<(Vec<f64>, usize)> {
    let n = sys.len();
    let m = sys.n_grad();
    let mut order: Vec<usize> = (0..cots.len()).collect();
    order.sort_by(|&a, &b| record.output_times[b].total_cmp(&record.output_times[a]));

    let mut nfe = 0;
    let stored = match mode {
        AdjointMode::Recompute => None,
        AdjointMode::Stored => {
            let slopes = match record.method {
                Method::Dopri5 => record.slopes.clone(),
                _ => {
                    let mut s: Vec<Vec<f64>> = record.stages.iter().map(|st| st.derivs[0].clone()).collect();
                    let mut end = vec![0.0; n];
                    sys.rhs(horizon, record.final_state(), &mut end);
                    nfe += 1;
                    s.push(end);
                    s
                }
            };
            Some(StoredTrajectory {
                times: &record.times,
                states: &record.states,
                slopes,
            })
        }
    };

    // augmented state: [y (recompute only), z, p]
    let off = if stored.is_some() { 0 } else { n };
    let mut aug = vec![0.0; off + n + m];
    if off > 0 {
        aug[..n].copy_from_slice(record.final_state());
    }
    let mut t_cur = horizon;
    let mut idx = 0;
    let mut f = |t: f64, x: &[f64], dx: &mut [f64]| {
        dx.fill(0.0);
        let (z, _) = x[off..].split_at(n);
        let mut x_bar = vec![0.0; n];
        let mut g = vec![0.0; m];
        match &stored {
            Some(traj) => {
                let mut y = vec![0.0; n];
                traj.eval(t, &mut y);
                sys.vjp(t, &y, z, &mut x_bar, &mut g);
            }
            None => {
                let (dy, _) = dx.split_at_mut(n);
                sys.rhs_vjp(t, &x[..n], z, dy, &mut x_bar, &mut g);
            }
        }
        for (d, v) in dx[off..off + n].iter_mut().zip(&x_bar) {
            *d = -v;
        }
        for (d, v) in dx[off + n..].iter_mut().zip(&g) {
            *d = -v;
        }
    };
    let tol = integrate::GRID_TOLERANCE * horizon.max(1.0);
    loop {
        while idx < order.len() && record.output_times[order[idx]] >= t_cur - tol {
            add_into(&mut aug[off..off + n], &cots[order[idx]]);
            idx += 1;
        }
        if t_cur <= tol {
            break;
        }
        let t_next = order.get(idx).map_or(0.0, |&k| record.output_times[k].max(0.0));
        let (next, used) = integrate_segment(&mut f, &aug, t_cur, t_next, backward)?;
        nfe += used;
        aug = next;
        t_cur = t_next;
    }
    Ok((aug[off + n..].to_vec(), nfe))
}

/// Opt-Disc gradient of `loss` for a single trajectory starting at `y0`.
pub fn optdisc_grad(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y0: &[f64],
    horizon: f64,
    loss: &dyn Loss,
    forward: &SolverConfig,
    backward: &SolverConfig,
    mode: AdjointMode,
) -> Result<GradientReport> {
    let sys = NodeSystem::new(layer, grid, 1)?;
    optdisc_grad_system(&sys, y0, horizon, grid, loss, forward, backward, mode, sys.layout())
}

/// Engine and solver settings of a gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub engine: Engine,
    pub forward: SolverConfig,
    /// Adjoint solver, used by Opt-Disc only.
    pub backward: SolverConfig,
    #[serde(default)]
    pub mode: AdjointMode,
}

impl EngineConfig {
    pub fn disc_opt(forward: SolverConfig) -> Self {
        Self {
            engine: Engine::DiscOpt,
            forward,
            backward: forward,
            mode: AdjointMode::Recompute,
        }
    }

    pub fn opt_disc(forward: SolverConfig, backward: SolverConfig) -> Self {
        Self {
            engine: Engine::OptDisc,
            forward,
            backward,
            mode: AdjointMode::Recompute,
        }
    }

    pub fn with_forward(self, forward: SolverConfig) -> Self {
        Self { forward, ..self }
    }

    /// Disc-Opt and the backward-Euler adjoint differentiate a fixed-step forward solve.
    pub fn validate(&self) -> Result<()> {
        self.forward.validate()?;
        self.backward.validate()?;
        if self.engine != Engine::OptDisc && !self.forward.method.is_fixed_step() {
            return Err(Error::Config(format!(
                "{} needs a fixed-step forward solver, got {}",
                self.engine.label(),
                self.forward.label()
            )));
        }
        Ok(())
    }
}

/// Gradient of `loss` for a single trajectory under any engine.
pub fn node_grad(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    y0: &[f64],
    horizon: f64,
    loss: &dyn Loss,
    config: &EngineConfig,
) -> Result<GradientReport> {
    config.validate()?;
    match config.engine {
        Engine::OptDisc => optdisc_grad(layer, grid, y0, horizon, loss, &config.forward, &config.backward, config.mode),
        Engine::DiscOpt => {
            integrate::check_horizon(horizon, grid)?;
            let sys = NodeSystem::new(layer, grid, 1)?;
            discopt_solve_grad(&sys, y0, horizon, grid, loss, &config.forward, sys.layout())
        }
        engine => {
            let record = integrate::node_solve(layer, grid, y0, horizon, &config.forward, loss.times())?;
            if engine == Engine::DiscOpt {
                discopt_grad(&record, layer, grid, loss)
            } else {
                backward_euler_adjoint_grad(&record, layer, grid, loss)
            }
        }
    }
}

/// Gradient of the batch-mean negative log-likelihood of a CNF.
pub fn cnf_grad(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    samples: ArrayView2<'_, f64>,
    horizon: f64,
    probe: TraceProbe,
    config: &EngineConfig,
) -> Result<GradientReport> {
    check_len("sample features", layer.dim(), samples.ncols())?;
    let sys = CnfSystem::new(layer, grid, samples.nrows(), probe)?;
    let loss = CnfNll::new(horizon, samples.nrows(), layer.dim());
    let mut x0: Vec<f64> = samples.iter().copied().collect();
    x0.resize(sys.len(), 0.0);
    match config.engine {
        Engine::DiscOpt => {
            config.validate()?;
            discopt_solve_grad(&sys, &x0, horizon, grid, &loss, &config.forward, sys.layout())
        }
        Engine::OptDisc => optdisc_grad_system(
            &sys,
            &x0,
            horizon,
            grid,
            &loss,
            &config.forward,
            &config.backward,
            config.mode,
            sys.layout(),
        ),
        Engine::BackwardEulerAdjoint => Err(Error::Config(
            "the backward-Euler adjoint is only provided for plain trajectories".into(),
        )),
    }
}
