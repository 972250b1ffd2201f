use ndarray::{s, Array2, ArrayView2};

use crate::control::ControlGrid;
use crate::dynamics::{stacked_forward, stacked_reverse, DynamicsLayer, Tape};
use crate::error::{check_len, Error, Result};

use super::{AdjointSystem, EvalCache, OdeSystem, StateLayout};

struct Taped {
    theta: Vec<f64>,
    tape: Tape,
}

fn check_layer(layer: &DynamicsLayer, grid: &ControlGrid, batch: usize) -> Result<()> {
    check_len("control layer parameters", layer.n_params(), grid.layer_len())?;
    if batch == 0 {
        return Err(Error::Contract("batch must hold at least one sample".into()));
    }
    Ok(())
}

/// `dY/dt = ℓ(θ(t), Y, t)` for a batch of states stored row-major.
pub struct NodeSystem<'a> {
    layer: &'a DynamicsLayer,
    grid: &'a ControlGrid,
    batch: usize,
}

impl<'a> NodeSystem<'a> {
    pub fn new(layer: &'a DynamicsLayer, grid: &'a ControlGrid, batch: usize) -> Result<Self> {
        check_layer(layer, grid, batch)?;
        Ok(Self { layer, grid, batch })
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout {
            batch: self.batch,
            features: self.layer.dim(),
            log_density: false,
        }
    }

    fn theta(&self, t: f64) -> Vec<f64> {
        let mut theta = vec![0.0; self.layer.n_params()];
        self.grid.eval_into(t, &mut theta);
        theta
    }

    fn matrix(&self, x: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((self.batch, self.layer.dim()), x.to_vec()).expect("state length")
    }
}

impl OdeSystem for NodeSystem<'_> {
    fn len(&self) -> usize {
        self.batch * self.layer.dim()
    }

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        let theta = self.theta(t);
        let (out, _) = stacked_forward(self.layer, &theta, self.matrix(x), self.batch, t, false);
        dx.copy_from_slice(out.as_slice().expect("standard layout"));
    }
}

impl AdjointSystem for NodeSystem<'_> {
    fn n_grad(&self) -> usize {
        self.grid.flat_len()
    }

    fn vjp(&self, t: f64, x: &[f64], v: &[f64], x_bar: &mut [f64], grad: &mut [f64]) {
        let mut dx = vec![0.0; x.len()];
        self.rhs_vjp(t, x, v, &mut dx, x_bar, grad);
    }

    fn rhs_vjp(&self, t: f64, x: &[f64], v: &[f64], dx: &mut [f64], x_bar: &mut [f64], grad: &mut [f64]) {
        let theta = self.theta(t);
        let (out, tape) = stacked_forward(self.layer, &theta, self.matrix(x), self.batch, t, true);
        dx.copy_from_slice(out.as_slice().expect("standard layout"));
        let mut g = vec![0.0; theta.len()];
        let in_bar = stacked_reverse(
            self.layer,
            &theta,
            tape.as_ref().expect("tape kept"),
            self.matrix(v),
            Some(&mut g),
        );
        for (a, b) in x_bar.iter_mut().zip(in_bar.iter()) {
            *a += b;
        }
        self.grid.scatter(t, &g, 1.0, grad);
    }

    fn rhs_cached(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Option<EvalCache> {
        let theta = self.theta(t);
        let (out, tape) = stacked_forward(self.layer, &theta, self.matrix(x), self.batch, t, true);
        dx.copy_from_slice(out.as_slice().expect("standard layout"));
        Some(Box::new(Taped {
            theta,
            tape: tape.expect("tape kept"),
        }))
    }

    fn vjp_cached(&self, cache: Option<&EvalCache>, t: f64, x: &[f64], v: &[f64], x_bar: &mut [f64], grad: &mut [f64]) {
        let Some(taped) = cache.and_then(|c| c.downcast_ref::<Taped>()) else {
            return self.vjp(t, x, v, x_bar, grad);
        };
        let mut g = vec![0.0; taped.theta.len()];
        let in_bar = stacked_reverse(self.layer, &taped.theta, &taped.tape, self.matrix(v), Some(&mut g));
        for (a, b) in x_bar.iter_mut().zip(in_bar.iter()) {
            *a += b;
        }
        self.grid.scatter(t, &g, 1.0, grad);
    }
}

/// Probe vectors for the trace channel.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceProbe {
    /// All canonical basis vectors: the exact trace.
    Exact,
    /// One noise vector per sample (`batch x features`), held fixed over a solve.
    Hutchinson(Array2<f64>),
}

/// Augmented CNF state `[Y (batch x features), g (batch)]` with
/// `dY/dt = ℓ(θ(t), Y, t)` and `dg/dt = -tr ∇_y ℓ`.
///
/// The trace is read off forward-mode tangents propagated alongside the
/// states, so one stacked evaluation yields both channels.
pub struct CnfSystem<'a> {
    layer: &'a DynamicsLayer,
    grid: &'a ControlGrid,
    batch: usize,
    probe: TraceProbe,
}

impl<'a> CnfSystem<'a> {
    pub fn new(layer: &'a DynamicsLayer, grid: &'a ControlGrid, batch: usize, probe: TraceProbe) -> Result<Self> {
        check_layer(layer, grid, batch)?;
        match &probe {
            TraceProbe::Exact => layer.check_trace_guard()?,
            TraceProbe::Hutchinson(eps) => {
                check_len("noise rows", batch, eps.nrows())?;
                check_len("noise columns", layer.dim(), eps.ncols())?;
            }
        }
        Ok(Self {
            layer,
            grid,
            batch,
            probe,
        })
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout {
            batch: self.batch,
            features: self.layer.dim(),
            log_density: true,
        }
    }

    fn tangent_blocks(&self) -> usize {
        match self.probe {
            TraceProbe::Exact => self.layer.dim(),
            TraceProbe::Hutchinson(_) => 1,
        }
    }

    fn stacked_input(&self, x: &[f64]) -> Array2<f64> {
        let (b, n) = (self.batch, self.layer.dim());
        let k = self.tangent_blocks();
        let mut m = Array2::zeros((b * (k + 1), n));
        m.slice_mut(s![..b, ..])
            .assign(&ArrayView2::from_shape((b, n), &x[..b * n]).expect("state length"));
        match &self.probe {
            TraceProbe::Exact => {
                for j in 0..k {
                    m.slice_mut(s![b * (j + 1)..b * (j + 2), j]).fill(1.0);
                }
            }
            TraceProbe::Hutchinson(eps) => m.slice_mut(s![b.., ..]).assign(eps),
        }
        m
    }

    fn write_rhs(&self, out: &Array2<f64>, dx: &mut [f64]) {
        let (b, n) = (self.batch, self.layer.dim());
        dx[..b * n].copy_from_slice(
            out.slice(s![..b, ..])
                .as_slice()
                .expect("leading rows are contiguous"),
        );
        for (s, d) in dx[b * n..].iter_mut().enumerate() {
            let trace = match &self.probe {
                TraceProbe::Exact => (0..n).map(|j| out[[b * (j + 1) + s, j]]).sum::<f64>(),
                TraceProbe::Hutchinson(eps) => (0..n).map(|i| eps[[s, i]] * out[[b + s, i]]).sum::<f64>(),
            };
            *d = -trace;
        }
    }
}

impl OdeSystem for CnfSystem<'_> {
    fn len(&self) -> usize {
        self.batch * (self.layer.dim() + 1)
    }

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        let mut theta = vec![0.0; self.layer.n_params()];
        self.grid.eval_into(t, &mut theta);
        let (out, _) = stacked_forward(self.layer, &theta, self.stacked_input(x), self.batch, t, false);
        self.write_rhs(&out, dx);
    }
}

impl AdjointSystem for CnfSystem<'_> {
    fn n_grad(&self) -> usize {
        self.grid.flat_len()
    }

    fn vjp(&self, t: f64, x: &[f64], v: &[f64], x_bar: &mut [f64], grad: &mut [f64]) {
        let mut dx = vec![0.0; x.len()];
        self.rhs_vjp(t, x, v, &mut dx, x_bar, grad);
    }

    fn rhs_vjp(&self, t: f64, x: &[f64], v: &[f64], dx: &mut [f64], x_bar: &mut [f64], grad: &mut [f64]) {
        let mut theta = vec![0.0; self.layer.n_params()];
        self.grid.eval_into(t, &mut theta);
        let (out, tape) = stacked_forward(self.layer, &theta, self.stacked_input(x), self.batch, t, true);
        self.write_rhs(&out, dx);
        self.pull_back(&theta, &tape.expect("tape kept"), t, v, x_bar, grad);
    }

    fn rhs_cached(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Option<EvalCache> {
        let mut theta = vec![0.0; self.layer.n_params()];
        self.grid.eval_into(t, &mut theta);
        let (out, tape) = stacked_forward(self.layer, &theta, self.stacked_input(x), self.batch, t, true);
        self.write_rhs(&out, dx);
        Some(Box::new(Taped {
            theta,
            tape: tape.expect("tape kept"),
        }))
    }

    fn vjp_cached(&self, cache: Option<&EvalCache>, t: f64, x: &[f64], v: &[f64], x_bar: &mut [f64], grad: &mut [f64]) {
        match cache.and_then(|c| c.downcast_ref::<Taped>()) {
            Some(taped) => self.pull_back(&taped.theta, &taped.tape, t, v, x_bar, grad),
            None => self.vjp(t, x, v, x_bar, grad),
        }
    }
}

impl CnfSystem<'_> {
    fn pull_back(&self, theta: &[f64], tape: &Tape, t: f64, v: &[f64], x_bar: &mut [f64], grad: &mut [f64]) {
        let (b, n) = (self.batch, self.layer.dim());
        let k = self.tangent_blocks();
        // cotangent of the stacked output: states take v directly, the tangent
        // rows take -v_g times the probe that reads the trace off them
        let mut out_bar = Array2::zeros((b * (k + 1), n));
        out_bar
            .slice_mut(s![..b, ..])
            .assign(&ArrayView2::from_shape((b, n), &v[..b * n]).expect("cotangent length"));
        let g_bar = &v[b * n..];
        match &self.probe {
            TraceProbe::Exact => {
                for j in 0..k {
                    for s in 0..b {
                        out_bar[[b * (j + 1) + s, j]] = -g_bar[s];
                    }
                }
            }
            TraceProbe::Hutchinson(eps) => {
                for s in 0..b {
                    for i in 0..n {
                        out_bar[[b + s, i]] = -g_bar[s] * eps[[s, i]];
                    }
                }
            }
        }
        let mut g = vec![0.0; theta.len()];
        let in_bar = stacked_reverse(self.layer, theta, tape, out_bar, Some(&mut g));
        for (a, bv) in x_bar[..b * n].iter_mut().zip(in_bar.slice(s![..b, ..]).iter()) {
            *a += bv;
        }
        self.grid.scatter(t, &g, 1.0, grad);
    }
}
