//! Central finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Coordinates whose analytic gradient is smaller than this are skipped
/// unless the numeric estimate is clearly nonzero.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Relative error used throughout the gradient suite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.item()
}

/// Reverse-mode gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    loss.backward()?;
    vars.iter()
        .map(|v| {
            v.grad()
                .ok_or_else(|| Error::contract("leaf lost its gradient"))
        })
        .collect()
}

/// Central finite-difference gradients of `f`.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].len()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(Tensor::new(inputs[i].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Compares analytic gradients with central differences.
pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> GradCheck {
    let mut report = GradCheck::default();
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            if av.abs() < GRAD_FLOOR {
                if nv.abs() > 1e-6 {
                    report.max_rel_error = report.max_rel_error.max(1.0);
                    report.checked += 1;
                } else {
                    report.skipped += 1;
                }
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(av, nv));
        }
    }
    report
}

/// Checks `f`'s reverse-mode gradients against central differences at
/// `inputs`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor]) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs)?;
    Ok(compare(&analytic, &numeric))
}
