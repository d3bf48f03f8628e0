//! Central finite-difference checks of tape gradients.

use super::array::Tensor;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing autodiff against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: usize,
    /// Coordinates with relative error below the tolerance.
    pub within_rel: usize,
    pub max_rel_err: f64,
    /// Largest absolute discrepancy among coordinates that failed the relative test.
    pub max_abs_outside: f64,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.coordinates == 0 {
            1.0
        } else {
            self.within_rel as f64 / self.coordinates as f64
        }
    }

    /// At least `min_fraction` of coordinates within the relative tolerance and
    /// every other coordinate within `abs_tol`.
    pub fn passes(&self, min_fraction: f64, abs_tol: f64) -> bool {
        self.fraction_within() >= min_fraction && self.max_abs_outside < abs_tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Checks `d f / d inputs` where `f` builds a scalar from fresh parameter leaves.
///
/// `f` must be deterministic; it is re-run twice per coordinate.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, rel_tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let mut report = GradCheckReport { coordinates: 0, within_rel: 0, max_rel_err: 0.0, max_abs_outside: 0.0 };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel < rel_tol {
                report.within_rel += 1;
            } else {
                report.max_abs_outside = report.max_abs_outside.max((a - numeric).abs());
            }
        }
    }
    Ok(report)
}
