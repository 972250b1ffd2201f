//! The parameter trajectory θ(t), stored as control layers on a control grid.

use std::ops::Deref;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsLayer, LayerSpec};
use crate::error::{check_len, Error, Result};
use crate::io::write_atomic;

/// Slack allowed when a time is checked against `[0, T]`.
pub const TIME_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    #[default]
    Constant,
}

/// All control layers concatenated in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams(pub Vec<f64>);

impl Deref for FlatParams {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    times: Vec<f64>,
    horizon: f64,
    n_params: usize,
    values: Vec<f64>,
    interp: Interpolation,
}

impl ControlGrid {
    pub fn new(
        times: Vec<f64>,
        layers: Vec<Vec<f64>>,
        horizon: f64,
        interp: Interpolation,
    ) -> Result<Self> {
        if times.is_empty() || times.len() != layers.len() {
            return Err(Error::Contract(format!(
                "control grid needs one layer per time ({} times, {} layers)",
                times.len(),
                layers.len()
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::Contract(format!("horizon must be positive, got {horizon}")));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Contract("control times must be strictly increasing".into()));
        }
        if times[0] < -TIME_TOLERANCE || times[times.len() - 1] > horizon + TIME_TOLERANCE {
            return Err(Error::Contract(format!("control times must lie in [0, {horizon}]")));
        }
        let n_params = layers[0].len();
        let mut values = Vec::with_capacity(n_params * layers.len());
        for layer in &layers {
            check_len("control layer", n_params, layer.len())?;
            values.extend_from_slice(layer);
        }
        Ok(Self {
            times,
            horizon,
            n_params,
            values,
            interp,
        })
    }

    /// A single control layer: θ constant in time.
    pub fn constant(theta: Vec<f64>, horizon: f64) -> Self {
        Self::new(vec![0.0], vec![theta], horizon, Interpolation::Constant)
            .expect("single layer grid")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interp
    }

    pub fn num_layers(&self) -> usize {
        self.times.len()
    }

    /// Parameters per control layer.
    pub fn layer_len(&self) -> usize {
        self.n_params
    }

    pub fn layer(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_params..(c + 1) * self.n_params]
    }

    pub fn layers(&self) -> Vec<Vec<f64>> {
        (0..self.num_layers()).map(|c| self.layer(c).to_vec()).collect()
    }

    pub fn flat_len(&self) -> usize {
        self.values.len()
    }

    pub fn flatten(&self) -> FlatParams {
        FlatParams(self.values.clone())
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    /// Same grid with the parameters replaced by `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        check_len("flat parameters", self.values.len(), flat.len())?;
        Ok(Self {
            values: flat.to_vec(),
            ..self.clone()
        })
    }

    /// Interpolation weights at `t`: θ(t) = w0·θ[i0] + w1·θ[i1]. Clamps outside the control span.
    pub fn weights(&self, t: f64) -> [(usize, f64); 2] {
        let last = self.times.len() - 1;
        if t <= self.times[0] {
            return [(0, 1.0), (0, 0.0)];
        }
        if t >= self.times[last] {
            return [(last, 1.0), (last, 0.0)];
        }
        // first index with times[i] > t, so i >= 1
        let i = self.times.partition_point(|&s| s <= t);
        match self.interp {
            Interpolation::Constant => [(i - 1, 1.0), (i, 0.0)],
            Interpolation::Linear => {
                let (a, b) = (self.times[i - 1], self.times[i]);
                let w = (t - a) / (b - a);
                [(i - 1, 1.0 - w), (i, w)]
            }
        }
    }

    pub fn eval_theta(&self, t: f64) -> Result<Vec<f64>> {
        if t < -TIME_TOLERANCE || t > self.horizon + TIME_TOLERANCE {
            return Err(Error::Range {
                t,
                horizon: self.horizon,
            });
        }
        let mut out = vec![0.0; self.n_params];
        self.eval_into(t, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation used inside solvers.
    pub(crate) fn eval_into(&self, t: f64, out: &mut [f64]) {
        let [(i0, w0), (i1, w1)] = self.weights(t);
        let a = self.layer(i0);
        if w1 == 0.0 {
            out.copy_from_slice(a);
            return;
        }
        let b = self.layer(i1);
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = w0 * x + w1 * y;
        }
    }

    /// Adds `scale · w_c(t) · g` into the flat gradient of every control layer `c`
    /// (the transpose of the interpolation).
    pub fn scatter(&self, t: f64, g: &[f64], scale: f64, into: &mut [f64]) {
        for (c, w) in self.weights(t) {
            if w == 0.0 {
                continue;
            }
            let dst = &mut into[c * self.n_params..(c + 1) * self.n_params];
            let s = scale * w;
            for (d, v) in dst.iter_mut().zip(g) {
                *d += s * v;
            }
        }
    }

    /// Prolongation onto `new_times` using this grid's own interpolation rule.
    pub fn refine_controls(&self, new_times: &[f64]) -> Result<Self> {
        let layers = new_times
            .iter()
            .map(|&t| self.eval_theta(t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(new_times.to_vec(), layers, self.horizon, self.interp)
    }
}

/// Glorot-uniform weights, zero biases.
pub fn glorot_init(layer: &DynamicsLayer, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    glorot_from(layer, &mut rng)
}

fn glorot_from(layer: &DynamicsLayer, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut theta = vec![0.0; layer.n_params()];
    for map in layer.affine_maps() {
        let bound = (6.0 / (map.fan_in + map.fan_out) as f64).sqrt();
        let n = map.fan_in * map.fan_out;
        for w in &mut theta[map.weight_offset..map.weight_offset + n] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    theta
}

/// A grid whose layers are independent Glorot draws from one seeded stream.
pub fn glorot_grid(
    layer: &DynamicsLayer,
    times: Vec<f64>,
    horizon: f64,
    interp: Interpolation,
    seed: u64,
) -> Result<ControlGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = times.iter().map(|_| glorot_from(layer, &mut rng)).collect();
    ControlGrid::new(times, layers, horizon, interp)
}

/// JSON checkpoint: layer description, control grid and (optionally) the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layer: LayerSpec,
    pub control_times: Vec<f64>,
    pub horizon: f64,
    pub interpolation: Interpolation,
    pub params: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(layer: &DynamicsLayer, grid: &ControlGrid, config: Option<serde_json::Value>) -> Self {
        Self {
            layer: layer.spec().clone(),
            control_times: grid.times().to_vec(),
            horizon: grid.horizon(),
            interpolation: grid.interpolation(),
            params: grid.layers(),
            config,
        }
    }

    pub fn restore(&self) -> Result<(DynamicsLayer, ControlGrid)> {
        let layer = DynamicsLayer::from_spec(&self.layer)?;
        let grid = ControlGrid::new(
            self.control_times.clone(),
            self.params.clone(),
            self.horizon,
            self.interpolation,
        )?;
        check_len("checkpoint layer parameters", layer.n_params(), grid.layer_len())?;
        Ok((layer, grid))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
