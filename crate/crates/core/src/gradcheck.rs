//! Finite-difference validation of tape gradients.
//!
//! The central-difference oracle is deliberately independent of the backward
//! pass: it only ever calls the forward function and reads the loss value.

use crate::tape::{GradMap, ParamStore, Tape, Var};
use crate::tensor::KernelError;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// max over all scalar parameters of
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    /// Flat index of the worst entry within that parameter.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// A differentiable scalar function: builds a loss on the given tape from the
/// given parameters. Must be deterministic (dropout disabled).
pub trait LossFn {
    fn eval(&self, tape: &mut Tape, params: &ParamStore) -> Result<Var, KernelError>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, KernelError>,
{
    fn eval(&self, tape: &mut Tape, params: &ParamStore) -> Result<Var, KernelError> {
        self(tape, params)
    }
}

fn forward_value(f: &impl LossFn, params: &ParamStore) -> Result<f64, KernelError> {
    let mut tape = Tape::new();
    let loss = f.eval(&mut tape, params)?;
    let v = tape.value(loss).as_scalar()?;
    if !v.is_finite() {
        return Err(KernelError::Numerics {
            op: "grad_check",
            detail: format!("non-finite loss value {v}"),
        });
    }
    Ok(v)
}

/// One reverse-mode pass: loss value plus analytic gradients.
pub fn tape_gradients(
    f: &impl LossFn,
    params: &ParamStore,
) -> Result<(f64, GradMap), KernelError> {
    let mut tape = Tape::new();
    let loss = f.eval(&mut tape, params)?;
    let v = tape.value(loss).as_scalar()?;
    if !v.is_finite() {
        return Err(KernelError::Numerics {
            op: "grad_check",
            detail: format!("non-finite loss value {v}"),
        });
    }
    let grads = tape.backward(loss)?;
    Ok((v, grads))
}

/// Compare a supplied analytic gradient against central differences.
pub fn finite_diff_check(
    f: &impl LossFn,
    params: &ParamStore,
    analytic: &GradMap,
    eps: f64,
) -> Result<CheckReport, KernelError> {
    assert!(eps > 0.0, "eps must be positive");
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut scratch = params.clone();
    for (name, base) in params.iter() {
        for i in 0..base.numel() {
            let orig = base.data()[i];
            scratch.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = forward_value(f, &scratch)?;
            scratch.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = forward_value(f, &scratch)?;
            scratch.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic
                .get(name)
                .map(|t| t.data()[i])
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Full check: compute analytic gradients on a tape, then sweep every scalar
/// parameter with central differences.
pub fn grad_check(
    f: &impl LossFn,
    params: &ParamStore,
    eps: f64,
) -> Result<CheckReport, KernelError> {
    let (_, analytic) = tape_gradients(f, params)?;
    finite_diff_check(f, params, &analytic, eps)
}
