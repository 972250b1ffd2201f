//! Time-dependent vector fields `ℓ(θ, y, t)` with hand-derived derivatives.
//!
//! Three layer kinds are supported:
//!
//! * `linear`: the affine field `A y (+ b)`,
//! * `cubic-mlp`: `D2(tanh(D1(y∘3)))`, used for time-series regression,
//! * `concatsquash-stack`: compositions of concatsquash layers
//!   `(D2 y) ⊙ σ(D1 t) + D0 t`, used for continuous normalizing flows.
//!
//! All kinds are lowered to a chain of primitive ops (see `ops`) that is
//! evaluated on row-stacked batches. The single-sample functions here are thin
//! wrappers over batches of one.

mod ops;
mod pointwise;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
pub(crate) use ops::Op;
pub(crate) use ops::Tape;
pub use pointwise::Activation;
use pointwise::Pointwise;

/// Default upper bound on the state dimension for [`DynamicsLayer::exact_trace`].
pub const DEFAULT_TRACE_GUARD: usize = 64;

/// Shape descriptor of a concatsquash stack.
///
/// Each of the `flow_steps` blocks is `c(hidden→dim) ∘ c(hidden→hidden)^(hidden_layers-1) ∘ c(dim→hidden)`.
/// `activation` is applied between consecutive concatsquash layers (never
/// after the last one); `gate` is the σ acting on the time input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcatsquashShape {
    pub dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    #[serde(default = "one")]
    pub flow_steps: usize,
    #[serde(default = "tanh")]
    pub gate: Activation,
    #[serde(default = "tanh")]
    pub activation: Activation,
}

fn one() -> usize {
    1
}

fn tanh() -> Activation {
    Activation::Tanh
}

fn default_hidden() -> usize {
    50
}

/// Serializable description of a layer; the checkpoint and config formats use it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Linear {
        dim: usize,
        #[serde(default)]
        bias: bool,
    },
    CubicMlp {
        dim: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    ConcatsquashStack(ConcatsquashShape),
}

/// One affine map inside a layer, as seen by weight initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineMap {
    pub weight_offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the bias vector (length `fan_out`), if the map has one.
    pub bias_offset: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub value: f64,
    pub mode: TraceMode,
    /// Number of noise vectors (Hutchinson) or basis vectors (exact) used.
    pub samples: usize,
}

/// A vector field `ℓ(θ, y, t): R^dim → R^dim`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsLayer {
    spec: LayerSpec,
    dim: usize,
    ops: Vec<Op>,
    n_params: usize,
}

impl DynamicsLayer {
    pub fn linear(dim: usize, bias: bool) -> Self {
        Self::from_spec(&LayerSpec::Linear { dim, bias }).expect("valid linear spec")
    }

    pub fn cubic_mlp(dim: usize, hidden: usize) -> Self {
        Self::from_spec(&LayerSpec::CubicMlp { dim, hidden }).expect("valid cubic-mlp spec")
    }

    pub fn concatsquash_stack(shape: ConcatsquashShape) -> Result<Self> {
        Self::from_spec(&LayerSpec::ConcatsquashStack(shape))
    }

    pub fn from_spec(spec: &LayerSpec) -> Result<Self> {
        let mut ops = Vec::new();
        let mut offset = 0;
        let mut push = |op: Op, ops: &mut Vec<Op>| {
            offset += op.n_params();
            ops.push(op);
        };
        let dim = match *spec {
            LayerSpec::Linear { dim, bias } => {
                if dim == 0 {
                    return Err(Error::Config("linear layer needs dim > 0".into()));
                }
                push(
                    Op::Affine {
                        n_in: dim,
                        n_out: dim,
                        offset: 0,
                        bias,
                    },
                    &mut ops,
                );
                dim
            }
            LayerSpec::CubicMlp { dim, hidden } => {
                if dim == 0 || hidden == 0 {
                    return Err(Error::Config("cubic-mlp needs dim, hidden > 0".into()));
                }
                push(Op::Pointwise(Pointwise::Cube), &mut ops);
                push(
                    Op::Affine {
                        n_in: dim,
                        n_out: hidden,
                        offset: 0,
                        bias: true,
                    },
                    &mut ops,
                );
                push(Op::Pointwise(Pointwise::Tanh), &mut ops);
                let second = dim * hidden + hidden;
                push(
                    Op::Affine {
                        n_in: hidden,
                        n_out: dim,
                        offset: second,
                        bias: true,
                    },
                    &mut ops,
                );
                dim
            }
            LayerSpec::ConcatsquashStack(shape) => {
                let ConcatsquashShape {
                    dim,
                    hidden,
                    hidden_layers,
                    flow_steps,
                    gate,
                    activation,
                } = shape;
                if dim == 0 || hidden == 0 || hidden_layers == 0 || flow_steps == 0 {
                    return Err(Error::Config(
                        "concatsquash stack needs dim, hidden, hidden_layers, flow_steps > 0".into(),
                    ));
                }
                let mut widths = Vec::new();
                for _ in 0..flow_steps {
                    widths.push((dim, hidden));
                    for _ in 1..hidden_layers {
                        widths.push((hidden, hidden));
                    }
                    widths.push((hidden, dim));
                }
                let mut off = 0;
                let last = widths.len() - 1;
                for (i, (n_in, n_out)) in widths.into_iter().enumerate() {
                    let op = Op::Squash {
                        n_in,
                        n_out,
                        offset: off,
                        gate: gate.pointwise(),
                    };
                    off += op.n_params();
                    push(op, &mut ops);
                    if i != last {
                        if let Some(kind) = activation.pointwise() {
                            push(Op::Pointwise(kind), &mut ops);
                        }
                    }
                }
                dim
            }
        };
        let n_params = ops.iter().map(Op::n_params).sum();
        debug_assert_eq!(n_params, offset);
        Ok(Self {
            spec: spec.clone(),
            dim,
            ops,
            n_params,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    /// State dimension `n_f`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Every affine map in parameter order (weight matrices first, as laid out).
    pub fn affine_maps(&self) -> Vec<AffineMap> {
        let mut maps = Vec::new();
        for op in &self.ops {
            match *op {
                Op::Pointwise(_) => {}
                Op::Affine {
                    n_in,
                    n_out,
                    offset,
                    bias,
                } => maps.push(AffineMap {
                    weight_offset: offset,
                    fan_in: n_in,
                    fan_out: n_out,
                    bias_offset: bias.then_some(offset + n_in * n_out),
                }),
                Op::Squash {
                    n_in,
                    n_out,
                    offset,
                    ..
                } => {
                    let base = offset + n_in * n_out;
                    // D2: state -> out, with bias
                    maps.push(AffineMap {
                        weight_offset: offset,
                        fan_in: n_in,
                        fan_out: n_out,
                        bias_offset: Some(base),
                    });
                    // D1: time -> out, with bias
                    maps.push(AffineMap {
                        weight_offset: base + n_out,
                        fan_in: 1,
                        fan_out: n_out,
                        bias_offset: Some(base + 2 * n_out),
                    });
                    // D0: time -> out, no bias
                    maps.push(AffineMap {
                        weight_offset: base + 3 * n_out,
                        fan_in: 1,
                        fan_out: n_out,
                        bias_offset: None,
                    });
                }
            }
        }
        maps
    }

    fn check(&self, theta: &[f64], y: &[f64]) -> Result<()> {
        check_len("parameter vector", self.n_params, theta.len())?;
        check_len("state vector", self.dim, y.len())
    }

    fn row(&self, y: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, self.dim), y.to_vec()).expect("checked length")
    }

    pub fn forward(&self, theta: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(theta, y)?;
        let (out, _) = ops::forward(&self.ops, theta, self.row(y), 1, t, false);
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// `(∇_y ℓ)ᵀ z`: the state cotangent.
    pub fn vjp_state(&self, theta: &[f64], y: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        self.check(theta, y)?;
        check_len("cotangent", self.dim, z.len())?;
        let (_, tape) = ops::forward(&self.ops, theta, self.row(y), 1, t, true);
        let bar = ops::reverse(&self.ops, theta, &tape.expect("tape"), self.row(z), None);
        Ok(bar.into_raw_vec_and_offset().0)
    }

    /// `(∇_θ ℓ)ᵀ z`: the parameter cotangent.
    pub fn vjp_params(&self, theta: &[f64], y: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        self.check(theta, y)?;
        check_len("cotangent", self.dim, z.len())?;
        let (_, tape) = ops::forward(&self.ops, theta, self.row(y), 1, t, true);
        let mut grad = vec![0.0; self.n_params];
        ops::reverse(&self.ops, theta, &tape.expect("tape"), self.row(z), Some(&mut grad));
        Ok(grad)
    }

    /// Trace of `∇_y ℓ` from `dim` VJPs against the canonical basis.
    pub fn exact_trace(&self, theta: &[f64], y: &[f64], t: f64) -> Result<TraceEstimate> {
        self.exact_trace_guarded(theta, y, t, DEFAULT_TRACE_GUARD)
    }

    pub fn exact_trace_guarded(
        &self,
        theta: &[f64],
        y: &[f64],
        t: f64,
        guard: usize,
    ) -> Result<TraceEstimate> {
        self.check(theta, y)?;
        self.check_trace_guard_at(guard)?;
        let (_, tape) = ops::forward(&self.ops, theta, self.row(y), 1, t, true);
        let tape = tape.expect("tape");
        let mut value = 0.0;
        let mut basis = vec![0.0; self.dim];
        for i in 0..self.dim {
            basis[i] = 1.0;
            value += self.quadratic_form(theta, &tape, &basis);
            basis[i] = 0.0;
        }
        Ok(TraceEstimate {
            value,
            mode: TraceMode::Exact,
            samples: self.dim,
        })
    }

    /// Fails when exact traces would exceed the default dimension guard.
    pub fn check_trace_guard(&self) -> Result<()> {
        self.check_trace_guard_at(DEFAULT_TRACE_GUARD)
    }

    fn check_trace_guard_at(&self, guard: usize) -> Result<()> {
        if self.dim > guard {
            return Err(Error::TraceGuard {
                dim: self.dim,
                guard,
            });
        }
        Ok(())
    }

    /// Single-probe Hutchinson estimate `εᵀ (∇_y ℓ) ε`.
    pub fn hutchinson_trace(
        &self,
        theta: &[f64],
        y: &[f64],
        t: f64,
        eps: &[f64],
    ) -> Result<TraceEstimate> {
        self.check(theta, y)?;
        check_len("noise vector", self.dim, eps.len())?;
        let (_, tape) = ops::forward(&self.ops, theta, self.row(y), 1, t, true);
        Ok(TraceEstimate {
            value: self.quadratic_form(theta, &tape.expect("tape"), eps),
            mode: TraceMode::Hutchinson,
            samples: 1,
        })
    }

    fn quadratic_form(&self, theta: &[f64], tape: &Tape, eps: &[f64]) -> f64 {
        let bar = ops::reverse(&self.ops, theta, tape, self.row(eps), None);
        bar.iter().zip(eps).map(|(a, b)| a * b).sum()
    }

    /// Evaluates `ℓ` on every row of `ys`.
    pub fn forward_batch(&self, theta: &[f64], ys: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        check_len("parameter vector", self.n_params, theta.len())?;
        check_len("state columns", self.dim, ys.ncols())?;
        let batch = ys.nrows();
        let (out, _) = ops::forward(&self.ops, theta, ys.to_owned(), batch, t, false);
        Ok(out)
    }

    pub(crate) fn ops(&self) -> &[Op] {
        &self.ops
    }
}

/// Stacked evaluation used by the integrators: rows `[0, batch)` are states,
/// the rest tangent blocks. Lengths are the caller's responsibility.
pub(crate) fn stacked_forward(
    layer: &DynamicsLayer,
    theta: &[f64],
    stacked: Array2<f64>,
    batch: usize,
    t: f64,
    keep_tape: bool,
) -> (Array2<f64>, Option<Tape>) {
    ops::forward(layer.ops(), theta, stacked, batch, t, keep_tape)
}

pub(crate) fn stacked_reverse(
    layer: &DynamicsLayer,
    theta: &[f64],
    tape: &Tape,
    out_bar: Array2<f64>,
    grad: Option<&mut [f64]>,
) -> Array2<f64> {
    ops::reverse(layer.ops(), theta, tape, out_bar, grad)
}

#[cfg(test)]
mod tests;
