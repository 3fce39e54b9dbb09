//! Central-difference gradient checking for scalar-valued tape functions.

use super::{DiffError, Tape, Tensor, VarId};

/// Default step for central differences.
pub const DEFAULT_FD_STEP: f32 = 1e-3;

/// Outcome of a finite-difference check over every input coordinate.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Largest relative error across coordinates.
    pub max_rel_error: f32,
    /// Coordinate (flat index) where the largest error occurred.
    pub worst_coord: usize,
    /// Analytic gradient at the worst coordinate.
    pub analytic_at_worst: f32,
    /// Numeric gradient at the worst coordinate.
    pub numeric_at_worst: f32,
    /// `max_rel_error <= tol`.
    pub passed: bool,
}

/// Checks the tape gradient of `f` at `x` against central differences with
/// step `h`, coordinate by coordinate.
///
/// `f` must build a scalar from the provided leaf. The relative error per
/// coordinate is `|a - n| / max(|a|, |n|, 1)`, which degrades to absolute
/// error near zero. Non-finite evaluations at any probe point are an error,
/// not a failed check.
pub fn finite_diff_check<F>(
    f: F,
    x: &Tensor,
    h: f32,
    tol: f32,
) -> Result<FiniteDiffReport, DiffError>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId, DiffError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, leaf)?;
    if !tape.value(out).shape().is_empty() {
        return Err(DiffError::NonScalarOutput {
            got: tape.value(out).shape().to_vec(),
        });
    }
    let grads = tape.backward(out)?;
    let zero;
    let analytic = match grads.wrt(leaf) {
        Some(t) => t.data(),
        // `f` may not touch the leaf at all; the true gradient is zero.
        None => {
            zero = vec![0.0f32; x.data().len()];
            &zero
        }
    };

    let eval = |probe: &Tensor| -> Result<f32, DiffError> {
        let mut t = Tape::new();
        let leaf = t.leaf(probe.clone());
        let out = f(&mut t, leaf)?;
        Ok(t.value(out).item())
    };

    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
        passed: true,
    };
    let mut probe = x.clone();
    for coord in 0..x.data().len() {
        let orig = probe.data()[coord];
        probe.data_mut()[coord] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[coord] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[coord] = orig;
        if !plus.is_finite() {
            return Err(DiffError::NonFiniteEvaluation { coord, side: "+h" });
        }
        if !minus.is_finite() {
            return Err(DiffError::NonFiniteEvaluation { coord, side: "-h" });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[coord];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = coord;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
