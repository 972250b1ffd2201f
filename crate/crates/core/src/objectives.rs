//! Loss functionals evaluated on solver outputs, and Tikhonov regularization.

use std::f64::consts::PI;

use crate::control::{ControlGrid, Interpolation};
use crate::error::{check_len, Error, Result};
use crate::integrate::{SolveRecord, StateLayout};

/// A loss that reads the trajectory at fixed output times.
pub trait Loss: Sync {
    fn times(&self) -> &[f64];

    /// Loss value and its gradient with respect to each output state.
    fn value_and_cotangents(&self, outputs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>;

    fn value(&self, outputs: &[Vec<f64>]) -> Result<f64> {
        Ok(self.value_and_cotangents(outputs)?.0)
    }
}

/// `h Σ_i ½‖y_i − u_i‖²` over the data points after the initial one.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionLoss {
    times: Vec<f64>,
    targets: Vec<Vec<f64>>,
    weight: f64,
}

impl RegressionLoss {
    pub fn new(times: Vec<f64>, targets: Vec<Vec<f64>>, weight: f64) -> Result<Self> {
        check_len("regression targets", times.len(), targets.len())?;
        if let Some(first) = targets.first() {
            for u in &targets {
                check_len("target dimension", first.len(), u.len())?;
            }
        }
        Ok(Self { times, targets, weight })
    }

    /// Equidistant data: the weight is the data spacing.
    pub fn equidistant(times: Vec<f64>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Data("regression needs at least two data points".into()));
        }
        let h = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        Self::new(times, targets, h)
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }
}

impl Loss for RegressionLoss {
    fn times(&self) -> &[f64] {
        &self.times
    }

    fn value_and_cotangents(&self, outputs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        check_len("regression outputs", self.targets.len(), outputs.len())?;
        let mut value = 0.0;
        let mut cots = Vec::with_capacity(outputs.len());
        for (i, (y, u)) in outputs.iter().zip(&self.targets).enumerate() {
            check_len("output state", u.len(), y.len())?;
            if i == 0 {
                cots.push(vec![0.0; y.len()]);
                continue;
            }
            let r: Vec<f64> = y.iter().zip(u).map(|(a, b)| a - b).collect();
            value += 0.5 * r.iter().map(|v| v * v).sum::<f64>();
            cots.push(r.iter().map(|v| self.weight * v).collect());
        }
        Ok((self.weight * value, cots))
    }
}

/// `½ w ‖y(T) − u‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalLoss {
    times: [f64; 1],
    target: Vec<f64>,
    weight: f64,
}

impl TerminalLoss {
    pub fn new(horizon: f64, target: Vec<f64>, weight: f64) -> Self {
        Self {
            times: [horizon],
            target,
            weight,
        }
    }
}

impl Loss for TerminalLoss {
    fn times(&self) -> &[f64] {
        &self.times
    }

    fn value_and_cotangents(&self, outputs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        check_len("terminal outputs", 1, outputs.len())?;
        check_len("terminal state", self.target.len(), outputs[0].len())?;
        let r: Vec<f64> = outputs[0].iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let value = 0.5 * self.weight * r.iter().map(|v| v * v).sum::<f64>();
        Ok((value, vec![r.iter().map(|v| self.weight * v).collect()]))
    }
}

/// Batch-mean negative log-likelihood `(n/2) log 2π + ½‖y(T)‖² + g(T)` with
/// a standard normal target density.
#[derive(Debug, Clone, PartialEq)]
pub struct CnfNll {
    times: [f64; 1],
    layout: StateLayout,
}

impl CnfNll {
    pub fn new(horizon: f64, batch: usize, features: usize) -> Self {
        Self {
            times: [horizon],
            layout: StateLayout {
                batch,
                features,
                log_density: true,
            },
        }
    }

    /// Per-sample values, in batch order.
    pub fn per_sample(&self, state: &[f64]) -> Result<Vec<f64>> {
        let l = self.layout;
        check_len("augmented state", l.len(), state.len())?;
        let c = 0.5 * l.features as f64 * (2.0 * PI).ln();
        Ok((0..l.batch)
            .map(|b| {
                let y = &state[b * l.features..(b + 1) * l.features];
                c + 0.5 * y.iter().map(|v| v * v).sum::<f64>() + state[l.batch * l.features + b]
            })
            .collect())
    }
}

impl Loss for CnfNll {
    fn times(&self) -> &[f64] {
        &self.times
    }

    fn value_and_cotangents(&self, outputs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        check_len("terminal outputs", 1, outputs.len())?;
        let state = &outputs[0];
        let l = self.layout;
        let per = self.per_sample(state)?;
        let inv = 1.0 / l.batch as f64;
        let value = per.iter().sum::<f64>() * inv;
        let mut cot = vec![0.0; state.len()];
        for (c, y) in cot[..l.batch * l.features].iter_mut().zip(state) {
            *c = inv * y;
        }
        for c in &mut cot[l.batch * l.features..] {
            *c = inv;
        }
        Ok((value, vec![cot]))
    }
}

/// Loss of the trajectory stored in `record`, read at its output times.
pub fn record_loss(record: &SolveRecord, loss: &dyn Loss) -> Result<f64> {
    if record.output_times.len() != loss.times().len() {
        return Err(Error::Contract("record was not solved at the loss output times".into()));
    }
    loss.value(&record.outputs)
}

pub fn regression_loss(record: &SolveRecord, targets: &RegressionLoss) -> Result<f64> {
    record_loss(record, targets)
}

pub fn cnf_nll(record: &SolveRecord) -> Result<f64> {
    let l = record.layout;
    if !l.log_density {
        return Err(Error::Contract("record has no log-density channel".into()));
    }
    CnfNll::new(record.times[record.times.len() - 1], l.batch, l.features).value(&[record.final_state().to_vec()])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(α/2) ∫_0^T ‖θ(t)‖² dt` in closed form under the grid's interpolation,
/// together with its gradient in flat control layout.
pub fn tikhonov_with_grad(grid: &ControlGrid, alpha: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; grid.flat_len()];
    if alpha == 0.0 {
        return (0.0, grad);
    }
    let times = grid.times();
    let n = grid.layer_len();
    let last = times.len() - 1;
    let mut value = 0.0;
    let constant_piece = |c: usize, len: f64, value: &mut f64, grad: &mut [f64]| {
        let v = grid.layer(c);
        *value += len * dot(v, v);
        for (g, x) in grad[c * n..(c + 1) * n].iter_mut().zip(v) {
            *g += 2.0 * len * x;
        }
    };
    constant_piece(0, times[0], &mut value, &mut grad);
    constant_piece(last, grid.horizon() - times[last], &mut value, &mut grad);
    for c in 0..last {
        let len = times[c + 1] - times[c];
        match grid.interpolation() {
            Interpolation::Constant => constant_piece(c, len, &mut value, &mut grad),
            Interpolation::Linear => {
                let (a, b) = (grid.layer(c), grid.layer(c + 1));
                value += len / 3.0 * (dot(a, a) + dot(a, b) + dot(b, b));
                for i in 0..n {
                    grad[c * n + i] += len / 3.0 * (2.0 * a[i] + b[i]);
                    grad[(c + 1) * n + i] += len / 3.0 * (a[i] + 2.0 * b[i]);
                }
            }
        }
    }
    for g in &mut grad {
        *g *= 0.5 * alpha;
    }
    (0.5 * alpha * value, grad)
}

pub fn tikhonov(grid: &ControlGrid, alpha: f64) -> f64 {
    tikhonov_with_grad(grid, alpha).0
}
