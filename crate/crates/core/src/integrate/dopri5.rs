//! Dormand–Prince 5(4) with PI step control and quintic dense output.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFE: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const UNDERFLOW: f64 = 1e-14;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Dopri5Stats {
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

pub(crate) struct Dopri5Options {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub keep_trajectory: bool,
}

pub(crate) struct Dopri5Run {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub slopes: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub stats: Dopri5Stats,
}

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|x| x * x).sum::<f64>() / n as f64).sqrt()
}

/// Starting step size after Hairer & Wanner; `f0 = f(t0, x0)`.
fn initial_step(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    t0: f64,
    x0: &[f64],
    f0: &[f64],
    dir: f64,
    span: f64,
    opts: &Dopri5Options,
    stats: &mut Dopri5Stats,
) -> f64 {
    let n = x0.len();
    let sk: Vec<f64> = x0.iter().map(|x| opts.atol + opts.rtol * x.abs()).collect();
    let d0 = rms(x0.iter().zip(&sk).map(|(x, s)| x / s), n);
    let d1 = rms(f0.iter().zip(&sk).map(|(x, s)| x / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);
    let x1: Vec<f64> = x0.iter().zip(f0).map(|(x, d)| x + dir * h0 * d).collect();
    let mut f1 = vec![0.0; n];
    f(t0 + dir * h0, &x1, &mut f1);
    stats.nfe += 1;
    let d2 = rms(f1.iter().zip(f0).zip(&sk).map(|((a, b), s)| (a - b) / s), n) / h0;
    if d1 == 0.0 && d2 == 0.0 {
        // locally constant solution: let the error estimate decide
        return span;
    }
    let d12 = d1.max(d2);
    let h1 = if d12 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d12).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Adaptive solve from `t0` to `t1` (either direction). States at `output_times`
/// come from the dense interpolant of the step that covers them.
pub(crate) fn dopri5(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    x0: &[f64],
    t0: f64,
    t1: f64,
    opts: &Dopri5Options,
    output_times: &[f64],
) -> Result<Dopri5Run> {
    let n = x0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut stats = Dopri5Stats::default();
    let mut outputs: Vec<Option<Vec<f64>>> = vec![None; output_times.len()];
    let mut order: Vec<usize> = (0..output_times.len()).collect();
    order.sort_by(|&a, &b| (dir * output_times[a]).total_cmp(&(dir * output_times[b])));
    let mut next_out = 0;

    let mut times = vec![t0];
    let mut states = vec![x0.to_vec()];
    let mut slopes = Vec::new();

    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    f(t0, &x, &mut k1);
    stats.nfe += 1;

    while next_out < order.len() && dir * (output_times[order[next_out]] - t0) <= 0.0 {
        outputs[order[next_out]] = Some(x.clone());
        next_out += 1;
    }

    if span == 0.0 {
        if opts.keep_trajectory {
            slopes.push(k1);
        }
        return Ok(finish(times, states, slopes, outputs, x0, stats));
    }

    let mut h = dir * initial_step(f, t0, &x, &k1, dir, span, opts, &mut stats);
    let mut t = t0;
    let mut facold: f64 = 1e-4;
    let mut last_rejected = false;
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut xs = vec![0.0; n];
    let mut y5 = vec![0.0; n];

    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::MaxSteps(opts.max_steps));
        }
        if h.abs() < UNDERFLOW * span {
            return Err(Error::Stiffness { t, h });
        }
        let last = dir * (t + 1.01 * h - t1) > 0.0;
        if last {
            h = t1 - t;
        }

        for i in 0..n {
            xs[i] = x[i] + h * (A21 * k1[i]);
        }
        f(t + C2 * h, &xs, &mut k2);
        for i in 0..n {
            xs[i] = x[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, &xs, &mut k3);
        for i in 0..n {
            xs[i] = x[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, &xs, &mut k4);
        for i in 0..n {
            xs[i] = x[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, &xs, &mut k5);
        for i in 0..n {
            xs[i] = x[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t1 } else { t + h };
        f(t_new, &xs, &mut k6);
        for i in 0..n {
            y5[i] = x[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t_new, &y5, &mut k7);
        stats.nfe += 6;

        let mut acc = 0.0;
        for i in 0..n {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sk = opts.atol + opts.rtol * x[i].abs().max(y5[i].abs());
            acc += (e / sk) * (e / sk);
        }
        let err = (acc / n as f64).sqrt();

        if !err.is_finite() {
            stats.rejected += 1;
            last_rejected = true;
            h *= FAC_MIN;
            continue;
        }

        let fac11 = err.powf(EXPO1);
        if err <= 1.0 {
            let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            facold = err.max(1e-4);
            stats.accepted += 1;

            let covers = |to: f64| last || dir * (to - t_new) <= 0.0;
            if next_out < order.len() && covers(output_times[order[next_out]]) {
                let cont = dense_coefficients(&x, &y5, h, [&k1, &k3, &k4, &k5, &k6, &k7]);
                while next_out < order.len() && covers(output_times[order[next_out]]) {
                    let to = output_times[order[next_out]];
                    let value = if dir * (to - t_new) >= 0.0 {
                        y5.clone()
                    } else {
                        dense_eval(&cont, (to - t) / h)
                    };
                    outputs[order[next_out]] = Some(value);
                    next_out += 1;
                }
            }

            if opts.keep_trajectory {
                slopes.push(k1.clone());
                times.push(t_new);
                states.push(y5.clone());
            }
            std::mem::swap(&mut k1, &mut k7);
            std::mem::swap(&mut x, &mut y5);
            t = t_new;
            if last {
                if opts.keep_trajectory {
                    slopes.push(k1.clone());
                }
                break;
            }
            if last_rejected {
                h_new = dir * h_new.abs().min(h.abs());
            }
            last_rejected = false;
            h = h_new;
        } else {
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
            stats.rejected += 1;
            last_rejected = true;
        }
    }

    if !opts.keep_trajectory {
        times.push(t);
        states.push(x.clone());
    }
    Ok(finish(times, states, slopes, outputs, &x, stats))
}

fn finish(
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
    outputs: Vec<Option<Vec<f64>>>,
    x_end: &[f64],
    stats: Dopri5Stats,
) -> Dopri5Run {
    Dopri5Run {
        times,
        states,
        slopes,
        outputs: outputs.into_iter().map(|o| o.unwrap_or_else(|| x_end.to_vec())).collect(),
        stats,
    }
}

fn dense_coefficients(x: &[f64], y: &[f64], h: f64, k: [&Vec<f64>; 6]) -> [Vec<f64>; 5] {
    let [k1, k3, k4, k5, k6, k7] = k;
    let n = x.len();
    let mut r = [x.to_vec(), vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let diff = y[i] - x[i];
        let bspl = h * k1[i] - diff;
        r[1][i] = diff;
        r[2][i] = bspl;
        r[3][i] = diff - h * k7[i] - bspl;
        r[4][i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
    }
    r
}

fn dense_eval(r: &[Vec<f64>; 5], s: f64) -> Vec<f64> {
    let s1 = 1.0 - s;
    (0..r[0].len())
        .map(|i| r[0][i] + s * (r[1][i] + s1 * (r[2][i] + s * (r[3][i] + s1 * r[4][i]))))
        .collect()
}
