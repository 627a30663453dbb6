//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the tape: the function under test is
//! re-evaluated under `no_grad` with perturbed inputs, so this is an
//! independent oracle for every backward rule.

use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

/// Result of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of scalar-valued `f` at `x` against central
/// finite differences with step `eps`.
///
/// The error is max_i |a_i - n_i| / max(||a||_inf, ||n||_inf, floor), i.e.
/// elementwise deviation normalized by the largest gradient magnitude.
/// Nondifferentiable kinks (e.g. ReLU at exactly 0) must be avoided by the
/// caller's choice of evaluation point.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> GradCheck
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Tensor<S>,
{
    x.set_requires_grad(true);
    x.zero_grad();
    let loss = f(x);
    assert_eq!(loss.numel(), 1, "finite_diff_check: f must return a scalar");
    loss.backward().expect("backward on scalar loss");
    let analytic: Vec<f64> = x
        .grad()
        .unwrap_or_else(|| vec![S::zero(); x.numel()])
        .iter()
        .map(|v| v.as_f64())
        .collect();

    let numeric: Vec<f64> = no_grad(|| {
        (0..x.numel())
            .map(|i| {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + S::from_f64(eps);
                let up = f(x).data()[0].as_f64();
                x.data_mut()[i] = orig - S::from_f64(eps);
                let down = f(x).data()[0].as_f64();
                x.data_mut()[i] = orig;
                (up - down) / (2.0 * eps)
            })
            .collect()
    });

    let floor: f64 = 1e-6;
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(floor, |m, v| m.max(v.abs()));
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max);

    GradCheck { max_rel_error, analytic, numeric }
}
