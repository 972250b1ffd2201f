//! Gradient, invertibility and trace-estimator checks.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlGrid;
use crate::dynamics::DynamicsLayer;
use crate::error::{check_len, Error, Result};
use crate::integrate::{cnf_solve, flow_batch, inverse_solve_batch, SolverConfig, TraceProbe};
use crate::io::write_atomic;
use crate::objectives::cnf_nll;

/// Values below `ROUNDING_FLOOR * |F(θ)|` are treated as rounding noise.
pub const ROUNDING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheckResult {
    pub steps: Vec<f64>,
    pub e0: Vec<f64>,
    pub e1: Vec<f64>,
    pub slope_e0: f64,
    pub slope_e1: f64,
    pub objective: f64,
    /// `gᵀv`
    pub directional: f64,
}

impl TaylorCheckResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "e0", "e1"])?;
        for ((h, a), b) in self.steps.iter().zip(&self.e0).zip(&self.e1) {
            w.write_record([h.to_string(), a.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_atomic(&dir.join(format!("{stem}.csv")), &buf)?;
        write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Seeded standard-normal direction scaled to unit length.
pub fn random_direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// `h = first, first/2, ...` (`count` values).
pub fn halving_steps(first: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| first * 0.5f64.powi(k as i32)).collect()
}

/// Least-squares slope of `log e` against `log h` over the points above `floor`.
pub fn loglog_slope(h: &[f64], e: &[f64], floor: f64) -> f64 {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(e)
        .filter(|(_, e)| **e > floor && e.is_finite())
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Taylor remainders `E0(h) = |F(θ+hv) − F(θ)|` and `E1(h) = |F(θ+hv) − F(θ) − h gᵀv|`.
pub fn taylor_check<F>(objective: F, theta: &[f64], grad: &[f64], v: &[f64], steps: &[f64]) -> Result<TaylorCheckResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    check_len("gradient", theta.len(), grad.len())?;
    check_len("direction", theta.len(), v.len())?;
    if steps.windows(2).any(|w| !(w[1] < w[0])) || steps.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Config("probe steps must be positive and strictly decreasing".into()));
    }
    let f0 = objective(theta)?;
    let gv: f64 = grad.iter().zip(v).map(|(g, d)| g * d).sum();
    let shifted: Vec<f64> = steps
        .par_iter()
        .map(|&h| {
            let p: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + h * d).collect();
            objective(&p)
        })
        .collect::<Result<_>>()?;
    let e0: Vec<f64> = shifted.iter().map(|f| (f - f0).abs()).collect();
    let e1: Vec<f64> = shifted.iter().zip(steps).map(|(f, h)| (f - f0 - h * gv).abs()).collect();
    let floor = ROUNDING_FLOOR * f0.abs();
    Ok(TaylorCheckResult {
        slope_e0: loglog_slope(steps, &e0, floor),
        slope_e1: loglog_slope(steps, &e1, floor),
        steps: steps.to_vec(),
        e0,
        e1,
        objective: f0,
        directional: gv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseErrorReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    /// Samples whose round trip failed or was non-finite.
    pub excluded: usize,
    pub forward: SolverConfig,
    pub backward: SolverConfig,
}

fn round_trip(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    samples: ArrayView2<'_, f64>,
    horizon: f64,
    forward: &SolverConfig,
    backward: &SolverConfig,
) -> Result<Array2<f64>> {
    let (y_t, _) = flow_batch(layer, grid, samples, horizon, forward)?;
    let (y0, _) = inverse_solve_batch(layer, grid, y_t.view(), horizon, backward)?;
    Ok(y0)
}

/// Mean of `‖f⁻¹(f(y0)) − y0‖` over the batch, forward with `forward` and back with `backward`.
pub fn inverse_error(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    samples: ArrayView2<'_, f64>,
    horizon: f64,
    forward: &SolverConfig,
    backward: &SolverConfig,
) -> Result<InverseErrorReport> {
    check_len("sample features", layer.dim(), samples.ncols())?;
    let per_sample: Vec<Option<f64>> = match round_trip(layer, grid, samples, horizon, forward, backward) {
        Ok(back) => (&back - &samples)
            .rows()
            .into_iter()
            .map(|r| Some(r.dot(&r).sqrt()))
            .collect(),
        Err(e) if e.is_numerical() => (0..samples.nrows())
            .into_par_iter()
            .map(|i| {
                let row = samples.row(i);
                let one = row.insert_axis(Axis(0));
                round_trip(layer, grid, one, horizon, forward, backward)
                    .ok()
                    .map(|b| (&b.row(0) - &row).mapv(|d| d * d).sum().sqrt())
            })
            .collect(),
        Err(e) => return Err(e),
    };
    let kept: Vec<f64> = per_sample.iter().flatten().copied().filter(|d| d.is_finite()).collect();
    let excluded = per_sample.len() - kept.len();
    let mean = if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    Ok(InverseErrorReport {
        per_sample: per_sample.into_iter().map(|d| d.unwrap_or(f64::NAN)).collect(),
        mean,
        excluded,
        forward: *forward,
        backward: *backward,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RediscretizationRow {
    pub solver: SolverConfig,
    pub label: String,
    pub loss: f64,
    pub nfe_forward: usize,
    pub inverse_error: f64,
    pub training: bool,
    pub error: Option<String>,
}

/// Test NLL, forward cost and inverse error of fixed parameters under each solver.
pub fn rediscretize_eval(
    layer: &DynamicsLayer,
    grid: &ControlGrid,
    samples: ArrayView2<'_, f64>,
    horizon: f64,
    solvers: &[SolverConfig],
    training: Option<&SolverConfig>,
) -> Vec<RediscretizationRow> {
    solvers
        .par_iter()
        .map(|cfg| {
            let mut row = RediscretizationRow {
                solver: *cfg,
                label: cfg.label(),
                loss: f64::NAN,
                nfe_forward: 0,
                inverse_error: f64::NAN,
                training: training == Some(cfg),
                error: None,
            };
            let eval = || -> Result<(f64, usize, f64)> {
                let rec = cnf_solve(layer, grid, samples, horizon, cfg, TraceProbe::Exact)?;
                let loss = cnf_nll(&rec)?;
                let inv = inverse_error(layer, grid, samples, horizon, cfg, cfg)?;
                Ok((loss, rec.nfe, inv.mean))
            };
            match eval() {
                Ok((loss, nfe, inv)) => {
                    row.loss = loss;
                    row.nfe_forward = nfe;
                    row.inverse_error = inv;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

pub fn write_rediscretization_csv<W: Write>(rows: &[RediscretizationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["solver", "loss", "nfe_f", "inverse_error", "training", "error"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.loss.to_string(),
            r.nfe_forward.to_string(),
            r.inverse_error.to_string(),
            r.training.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub mean: f64,
    pub stderr: f64,
    pub exact: f64,
    pub samples: usize,
}

/// Hutchinson estimates `εᵀ∇ℓ ε` for every row of `probes`, compared with the exact trace.
pub fn trace_stats_from_probes(
    layer: &DynamicsLayer,
    theta: &[f64],
    y: &[f64],
    t: f64,
    probes: ArrayView2<'_, f64>,
) -> Result<TraceStats> {
    let exact = layer.exact_trace(theta, y, t)?.value;
    let n = probes.nrows();
    if n == 0 {
        return Err(Error::Config("at least one probe is needed".into()));
    }
    let values: Vec<f64> = probes
        .rows()
        .into_iter()
        .map(|eps| layer.hutchinson_trace(theta, y, t, eps.as_slice().expect("row")).map(|e| e.value))
        .collect::<Result<_>>()?;
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(TraceStats {
        mean,
        stderr,
        exact,
        samples: n,
    })
}

/// Monte-Carlo statistics of `n_samples` Gaussian Hutchinson probes.
pub fn trace_estimator_stats(
    layer: &DynamicsLayer,
    theta: &[f64],
    y: &[f64],
    t: f64,
    n_samples: usize,
    seed: u64,
) -> Result<TraceStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = Array2::from_shape_fn((n_samples, layer.dim()), |_| rng.sample(StandardNormal));
    trace_stats_from_probes(layer, theta, y, t, probes.view())
}
