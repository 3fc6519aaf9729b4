//! Scalar activations used by the heads and the toy encoder.

/// Tanh-based GELU approximation with coefficients `0.8` and `0.036`.
///
/// These are not the usual `sqrt(2/pi)` / `0.044715` constants.
#[inline]
pub fn gelu_approx(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.8 * x + 0.036 * x * x * x).tanh())
}

#[inline]
pub fn gelu_approx_grad(x: f64) -> f64 {
    let t = (0.8 * x + 0.036 * x * x * x).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * (0.8 + 0.108 * x * x)
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `e^x / (e^x + e^-x)`, evaluated as `logistic(2x)` so it never overflows.
#[inline]
pub fn talu(x: f64) -> f64 {
    logistic(2.0 * x)
}

/// Derivative of [`talu`]; peaks at `0.5` for `x = 0`.
#[inline]
pub fn talu_grad(x: f64) -> f64 {
    let y = talu(x);
    2.0 * y * (1.0 - y)
}
