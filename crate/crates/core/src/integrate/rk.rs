use crate::error::{Error, Result};

use super::StepStages;

/// Butcher tableau of an explicit method; `a[i]` holds the coefficients of stage `i`.
#[derive(Debug)]
pub(crate) struct Tableau {
    pub c: &'static [f64],
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
}

impl Tableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

pub(crate) const EULER: Tableau = Tableau {
    c: &[0.0],
    a: &[&[]],
    b: &[1.0],
};

pub(crate) const RK4: Tableau = Tableau {
    c: &[0.0, 0.5, 0.5, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
};

/// `out = x + h Σ_j w_j k_j`; zero weights are skipped.
pub(crate) fn combine(x: &[f64], h: f64, w: &[f64], k: &[Vec<f64>], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (wj, kj) in w.iter().zip(k) {
            if *wj != 0.0 {
                acc += wj * kj[i];
            }
        }
        *o = x[i] + h * acc;
    }
}

pub(crate) struct FixedRun {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stages: Vec<StepStages>,
}

/// `n` equal steps from `t0` to `t1`; `t1 < t0` integrates backward.
pub(crate) fn fixed_steps(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    tab: &Tableau,
    x0: &[f64],
    t0: f64,
    t1: f64,
    n: usize,
    keep_stages: bool,
) -> Result<FixedRun> {
    let h = (t1 - t0) / n as f64;
    let s = tab.stages();
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut stages = Vec::with_capacity(if keep_stages { n } else { 0 });
    times.push(t0);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for step in 0..n {
        let t = t0 + step as f64 * h;
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(s);
        let mut derivs: Vec<Vec<f64>> = Vec::with_capacity(s);
        for i in 0..s {
            let mut xi = vec![0.0; x.len()];
            if i == 0 {
                xi.copy_from_slice(&x);
            } else {
                combine(&x, h, tab.a[i], &derivs, &mut xi);
            }
            let mut ki = vec![0.0; x.len()];
            f(t + tab.c[i] * h, &xi, &mut ki);
            inputs.push(xi);
            derivs.push(ki);
        }
        let mut next = vec![0.0; x.len()];
        combine(&x, h, tab.b, &derivs, &mut next);
        let t_next = if step + 1 == n { t1 } else { t0 + (step + 1) as f64 * h };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, t: t_next });
        }
        x.copy_from_slice(&next);
        times.push(t_next);
        states.push(next);
        if keep_stages {
            stages.push(StepStages { t, h, inputs, derivs });
        }
    }
    Ok(FixedRun { times, states, stages })
}
