use serde::{Deserialize, Serialize};

/// Scalar nonlinearity applied element-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub(crate) fn pointwise(self) -> Option<Pointwise> {
        match self {
            Activation::Identity => None,
            Activation::Tanh => Some(Pointwise::Tanh),
            Activation::Softplus => Some(Pointwise::Softplus),
            Activation::Sigmoid => Some(Pointwise::Sigmoid),
        }
    }
}

/// Element-wise maps with closed-form first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pointwise {
    Cube,
    Tanh,
    Softplus,
    Sigmoid,
}

impl Pointwise {
    /// Returns (f(x), f'(x), f''(x)).
    #[inline]
    pub(crate) fn eval(self, x: f64) -> (f64, f64, f64) {
        match self {
            Pointwise::Cube => (x * x * x, 3.0 * x * x, 6.0 * x),
            Pointwise::Tanh => {
                let f = tanh(x);
                let d = 1.0 - f * f;
                (f, d, -2.0 * f * d)
            }
            Pointwise::Softplus => {
                let s = sigmoid(x);
                (softplus(x), s, s * (1.0 - s))
            }
            Pointwise::Sigmoid => {
                let s = sigmoid(x);
                let d = s * (1.0 - s);
                (s, d, d * (1.0 - 2.0 * s))
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn value(self, x: f64) -> f64 {
        match self {
            Pointwise::Cube => x * x * x,
            Pointwise::Tanh => tanh(x),
            Pointwise::Softplus => softplus(x),
            Pointwise::Sigmoid => sigmoid(x),
        }
    }
}

/// `tanh` through a single `exp`; absolute error stays within a few ulps of 1.
#[inline]
fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let f = 1.0 - 2.0 / ((2.0 * x.abs()).exp() + 1.0);
    f.copysign(x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
