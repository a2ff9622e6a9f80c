//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it is independent
//! of the backward rules it validates. Run it on f64 tensors: with f32 storage
//! the rounding noise of a 1e-3 difference quotient is near 1e-4 relative.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Largest absolute error over all checked coordinates.
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a unit floor on the denominator, so coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares backward gradients of `f` at `inputs` against central finite
/// differences with step `h`. `f` must build a scalar from the given vars.
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheck>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| vec![T::ZERO; t.len()]))
        .collect();

    let eval = |ins: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item().to_f64())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let x0 = t.data()[i];
            work[ti].data_mut()[i] = T::from_f64(x0.to_f64() + h);
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = T::from_f64(x0.to_f64() - h);
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][i].to_f64();
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
