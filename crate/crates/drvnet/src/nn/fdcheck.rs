//! Central finite differences for verifying analytic gradients.
//!
//! These helpers only evaluate a user-supplied scalar function; they know
//! nothing about the backward passes they are used to check, so tests can
//! treat them as an independent numeric oracle.

/// Central difference d f / d theta at step `h`: (f(t+h) - f(t-h)) / 2h.
pub fn central_diff(mut eval: impl FnMut(f64) -> f64, theta: f64, h: f64) -> f64 {
    (eval(theta + h) - eval(theta - h)) / (2.0 * h)
}

/// Relative discrepancy between an analytic and a numeric derivative,
/// floored so that near-zero pairs compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Step size scaled to the magnitude of the parameter being perturbed.
pub fn step_for(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative_recovered() {
        let f = |x: f64| 3.0 * x * x + 2.0 * x;
        let d = central_diff(f, 1.5, 1e-6);
        assert!(rel_err(d, 3.0 * 2.0 * 1.5 + 2.0) < 1e-8);
    }
}
