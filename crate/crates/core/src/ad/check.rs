//! Finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradientReport {
    /// Worst relative error over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate achieving the worst error.
    pub worst_index: usize,
    /// Analytic derivative at that coordinate.
    pub analytic: f64,
    /// Central-difference estimate at that coordinate.
    pub numeric: f64,
}

/// Compare the tape gradient of a scalar function against central finite
/// differences at `point`.
///
/// `f` receives a fresh tape and the trainable leaf holding the point and
/// must return a scalar output var. Every probe rebuilds the tape, so
/// data-dependent branches (bin searches, masks) are re-resolved exactly as
/// the analytic path saw them.
///
/// Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, point: &[f64], epsilon: f64) -> GradientReport
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(epsilon > 0.0, "epsilon must be positive");

    let eval = |xs: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(xs.to_vec()));
        let out = f(&mut tape, x);
        tape.value(out).item()
    };

    let analytic = {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(point.to_vec()));
        let out = f(&mut tape, x);
        assert_eq!(tape.value(out).len(), 1, "grad_check target must be scalar");
        tape.backward(out).wrt(x).into_data()
    };

    let mut report = GradientReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let x0 = probe[i];
        probe[i] = x0 + epsilon;
        let up = eval(&probe);
        probe[i] = x0 - epsilon;
        let down = eval(&probe);
        probe[i] = x0;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (1e-8_f64).max(a.abs() + numeric.abs());
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}
