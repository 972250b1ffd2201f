//! Batched evaluation of a layer as a chain of primitive ops.
//!
//! Every op works on a *stacked* matrix: the first `batch` rows are primal
//! states, followed by `k` blocks of `batch` rows holding tangent vectors
//! (forward-mode directional derivatives) for the same samples. With `k = 0`
//! this is plain batched evaluation. Tangent row `r` belongs to sample
//! `r % batch`.
//!
//! The reverse sweep transposes the linearisation of the whole stacked map,
//! so one sweep yields cotangents for states, tangents and parameters. That
//! is what gives the CNF trace channel its second-derivative terms.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::pointwise::Pointwise;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Pointwise(Pointwise),
    /// `W h + b` with `W` stored row-major (n_out x n_in) at `offset`, then `b`.
    Affine {
        n_in: usize,
        n_out: usize,
        offset: usize,
        bias: bool,
    },
    /// `(W2 h + b2) * gate(w1 t + b1) + w0 t`; parameters stored as
    /// `W2 (n_out x n_in), b2, w1, b1, w0`.
    Squash {
        n_in: usize,
        n_out: usize,
        offset: usize,
        gate: Option<Pointwise>,
    },
}

impl Op {
    pub(crate) fn n_params(&self) -> usize {
        match *self {
            Op::Pointwise(_) => 0,
            Op::Affine {
                n_in, n_out, bias, ..
            } => n_out * n_in + if bias { n_out } else { 0 },
            Op::Squash { n_in, n_out, .. } => n_out * n_in + 4 * n_out,
        }
    }
}

enum Saved {
    Input(Array2<f64>),
    /// Input plus first and second derivatives at the primal rows.
    Pointwise {
        input: Array2<f64>,
        d1: Vec<f64>,
        d2: Vec<f64>,
    },
    Squash {
        input: Array2<f64>,
        pre: Array2<f64>,
        gate: Array1<f64>,
        gate_d: Array1<f64>,
    },
}

/// Intermediate values recorded by a forward sweep.
pub(crate) struct Tape {
    batch: usize,
    t: f64,
    saved: Vec<Saved>,
}

fn weight<'a>(theta: &'a [f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &theta[offset..offset + rows * cols])
        .expect("parameter slice sized by layer")
}

fn weight_mut(grad: &mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut grad[offset..offset + rows * cols])
        .expect("gradient slice sized by layer")
}

fn vector<'a>(theta: &'a [f64], offset: usize, len: usize) -> ArrayView1<'a, f64> {
    ArrayView1::from(&theta[offset..offset + len])
}

fn pointwise_forward(kind: Pointwise, input: &Array2<f64>, batch: usize, derivs: Option<(&mut Vec<f64>, &mut Vec<f64>)>) -> Array2<f64> {
    let src = input.as_slice().expect("standard layout");
    let m = batch * input.ncols();
    let mut out = Vec::with_capacity(src.len());
    let mut d1s = Vec::with_capacity(m);
    let mut d2s = Vec::with_capacity(m);
    for &x in &src[..m] {
        let (f, d1, d2) = kind.eval(x);
        out.push(f);
        d1s.push(d1);
        d2s.push(d2);
    }
    for block in src[m..].chunks_exact(m) {
        out.extend(block.iter().zip(&d1s).map(|(x, d)| d * x));
    }
    if let Some((a, b)) = derivs {
        *a = d1s;
        *b = d2s;
    }
    Array2::from_shape_vec(input.raw_dim(), out).expect("shape")
}

fn pointwise_reverse(input: &Array2<f64>, d1s: &[f64], d2s: &[f64], out_bar: &Array2<f64>, batch: usize) -> Array2<f64> {
    let src = input.as_slice().expect("standard layout");
    let ob = out_bar.as_slice().expect("standard layout");
    let m = batch * input.ncols();
    let mut bar: Vec<f64> = ob[..m].iter().zip(d1s).map(|(o, d)| d * o).collect();
    for (xb, obb) in src[m..].chunks_exact(m).zip(ob[m..].chunks_exact(m)) {
        for k in 0..m {
            bar[k] += d2s[k] * xb[k] * obb[k];
        }
    }
    for obb in ob[m..].chunks_exact(m) {
        bar.extend(obb.iter().zip(d1s).map(|(o, d)| d * o));
    }
    Array2::from_shape_vec(input.raw_dim(), bar).expect("shape")
}

/// Runs the op chain on a stacked matrix. Returns the stacked output and,
/// when requested, the tape needed by [`reverse`].
pub(crate) fn forward(
    ops: &[Op],
    theta: &[f64],
    input: Array2<f64>,
    batch: usize,
    t: f64,
    keep_tape: bool,
) -> (Array2<f64>, Option<Tape>) {
    let mut saved = Vec::with_capacity(if keep_tape { ops.len() } else { 0 });
    let mut h = input;
    for op in ops {
        let out = match *op {
            Op::Pointwise(kind) => {
                if keep_tape {
                    let (mut d1, mut d2) = (Vec::new(), Vec::new());
                    let out = pointwise_forward(kind, &h, batch, Some((&mut d1, &mut d2)));
                    saved.push(Saved::Pointwise { input: h, d1, d2 });
                    h = out;
                    continue;
                }
                pointwise_forward(kind, &h, batch, None)
            }
            Op::Affine {
                n_in,
                n_out,
                offset,
                bias,
            } => {
                let w = weight(theta, offset, n_out, n_in);
                let mut out = h.dot(&w.t());
                if bias {
                    let b = vector(theta, offset + n_out * n_in, n_out);
                    out.slice_mut(s![..batch, ..]).zip_mut_with(&b.broadcast((batch, n_out)).unwrap(), |o, &bb| *o += bb);
                }
                out
            }
            Op::Squash {
                n_in,
                n_out,
                offset,
                gate,
            } => {
                let base = offset + n_out * n_in;
                let w2 = weight(theta, offset, n_out, n_in);
                let b2 = vector(theta, base, n_out);
                let w1 = vector(theta, base + n_out, n_out);
                let b1 = vector(theta, base + 2 * n_out, n_out);
                let w0 = vector(theta, base + 3 * n_out, n_out);
                let mut pre = h.dot(&w2.t());
                let mut gate_v = Array1::zeros(n_out);
                let mut gate_d = Array1::zeros(n_out);
                for j in 0..n_out {
                    let p = w1[j] * t + b1[j];
                    let (g, d) = match gate {
                        Some(kind) => {
                            let (g, d, _) = kind.eval(p);
                            (g, d)
                        }
                        None => (p, 1.0),
                    };
                    gate_v[j] = g;
                    gate_d[j] = d;
                }
                let rows = pre.nrows();
                let ps = pre.as_slice_mut().expect("standard layout");
                let mut ov = Vec::with_capacity(rows * n_out);
                for (r, prow) in ps.chunks_exact_mut(n_out).enumerate() {
                    if r < batch {
                        for j in 0..n_out {
                            prow[j] += b2[j];
                            ov.push(prow[j] * gate_v[j] + w0[j] * t);
                        }
                    } else {
                        ov.extend(prow.iter().zip(gate_v.iter()).map(|(p, g)| p * g));
                    }
                }
                let out = Array2::from_shape_vec((rows, n_out), ov).expect("shape");
                if keep_tape {
                    saved.push(Saved::Squash {
                        input: h,
                        pre,
                        gate: gate_v,
                        gate_d,
                    });
                }
                h = out;
                continue;
            }
        };
        if keep_tape {
            saved.push(Saved::Input(h));
        }
        h = out;
    }
    let tape = keep_tape.then_some(Tape { batch, t, saved });
    (h, tape)
}

fn column_sums(m: ArrayView2<'_, f64>, mut into: ArrayViewMut1<'_, f64>) {
    for row in m.rows() {
        into.zip_mut_with(&row, |a, &b| *a += b);
    }
}

/// Transposed linearisation of the stacked forward map.
///
/// `out_bar` is the cotangent of the stacked output. Returns the cotangent of
/// the stacked input; parameter cotangents are accumulated into `grad` when
/// given.
pub(crate) fn reverse(
    ops: &[Op],
    theta: &[f64],
    tape: &Tape,
    out_bar: Array2<f64>,
    mut grad: Option<&mut [f64]>,
) -> Array2<f64> {
    let batch = tape.batch;
    let t = tape.t;
    let mut bar = out_bar;
    for (op, saved) in ops.iter().zip(tape.saved.iter()).rev() {
        bar = match (op, saved) {
            (Op::Pointwise(_), Saved::Pointwise { input, d1, d2 }) => pointwise_reverse(input, d1, d2, &bar, batch),
            (
                &Op::Affine {
                    n_in,
                    n_out,
                    offset,
                    bias,
                },
                Saved::Input(input),
            ) => {
                if let Some(g) = grad.as_deref_mut() {
                    let mut gw = weight_mut(g, offset, n_out, n_in);
                    general_mat_mul(1.0, &bar.t(), input, 1.0, &mut gw);
                    if bias {
                        let gb = ArrayViewMut1::from(&mut g[offset + n_out * n_in..offset + n_out * n_in + n_out]);
                        column_sums(bar.slice(s![..batch, ..]), gb);
                    }
                }
                bar.dot(&weight(theta, offset, n_out, n_in))
            }
            (
                &Op::Squash {
                    n_in,
                    n_out,
                    offset,
                    ..
                },
                Saved::Squash {
                    input,
                    pre,
                    gate,
                    gate_d,
                },
            ) => {
                let base = offset + n_out * n_in;
                let rows = bar.nrows();
                let bs = bar.as_slice().expect("standard layout");
                let mut pb = Vec::with_capacity(rows * n_out);
                for brow in bs.chunks_exact(n_out) {
                    pb.extend(brow.iter().zip(gate.iter()).map(|(b, g)| b * g));
                }
                let pre_bar = Array2::from_shape_vec((rows, n_out), pb).expect("shape");
                if let Some(g) = grad.as_deref_mut() {
                    let mut gw = weight_mut(g, offset, n_out, n_in);
                    general_mat_mul(1.0, &pre_bar.t(), input, 1.0, &mut gw);
                    // cotangents of the gate (every stacked row) and of the
                    // primal-only bias terms
                    let ps = pre.as_slice().expect("standard layout");
                    let mut gate_bar = vec![0.0; n_out];
                    let mut bias_bar = vec![0.0; n_out];
                    for (r, (brow, prow)) in bs.chunks_exact(n_out).zip(ps.chunks_exact(n_out)).enumerate() {
                        for j in 0..n_out {
                            gate_bar[j] += brow[j] * prow[j];
                        }
                        if r < batch {
                            for j in 0..n_out {
                                bias_bar[j] += brow[j];
                            }
                        }
                    }
                    for j in 0..n_out {
                        let p_bar = gate_bar[j] * gate_d[j];
                        g[base + j] += bias_bar[j] * gate[j];
                        g[base + n_out + j] += p_bar * t;
                        g[base + 2 * n_out + j] += p_bar;
                        g[base + 3 * n_out + j] += bias_bar[j] * t;
                    }
                }
                pre_bar.dot(&weight(theta, offset, n_out, n_in))
            }
            _ => unreachable!("tape out of sync with op chain"),
        };
    }
    bar
}
