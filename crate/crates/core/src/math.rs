//! Numerically stable math primitives shared by the loss and policy code.

/// Stable `log(1 + exp(x))`.
///
/// `log(1+exp(x)) = max(x,0) + log(1+exp(-|x|))`; the exponential argument is
/// always non-positive, so no overflow for any finite `x`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable sigmoid `1 / (1 + exp(-x))`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    let recip = 1.0 / (1.0 + e);
    if x >= 0.0 {
        recip
    } else {
        e * recip
    }
}

/// Stable `log(sigmoid(x)) = -softplus(-x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(sum(exp(xs)))` with the max subtracted first.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// In-place log-softmax over a weight row.
pub fn log_softmax(row: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(row);
    for (o, &w) in out.iter_mut().zip(row) {
        *o = w - lse;
    }
}
