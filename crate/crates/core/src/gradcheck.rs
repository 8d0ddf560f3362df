//! Finite-difference verification of the tape's backward rules.
//!
//! [`grad_check`] compares the autodiff gradient of a scalar-valued function
//! against central differences `(f(p+h) - f(p-h)) / 2h`, parameter by
//! parameter. The function must be deterministic (dropout disabled); the
//! harness evaluates it twice and refuses to report on a function whose two
//! evaluations differ.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;

/// Builds the loss graph from leaves that mirror `params`, in order.
pub trait LossFn {
    fn build(&self, tape: &mut Tape, params: &[TensorRef]) -> Result<TensorRef>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
{
    fn build(&self, tape: &mut Tape, params: &[TensorRef]) -> Result<TensorRef> {
        self(tape, params)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum relative error over every element of every parameter.
    pub max_rel_err: f64,
    /// Per-parameter maxima, in the order the parameters were given.
    pub per_param: Vec<f64>,
    pub tol: f64,
    pub pass: bool,
}

/// Central-difference gradient check.
///
/// `h` is the probe step (1e-5 is a good default in 64-bit floats) and `tol`
/// the maximum admissible relative error. `tol = 0` can never pass; that
/// property doubles as a sanity check of the harness itself.
pub fn grad_check(f: &dyn LossFn, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport> {
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let refs: Vec<TensorRef> = params
            .iter()
            .zip(values)
            .map(|(p, v)| tape.var(v.clone(), p.shape.clone()))
            .collect();
        let loss = f.build(&mut tape, &refs)?;
        Ok(tape.scalar_value(loss))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.values.clone()).collect();
    let first = eval(&base)?;
    let second = eval(&base)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    // Autodiff gradients from one recorded pass.
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = params
        .iter()
        .map(|p| tape.var(p.values.clone(), p.shape.clone()))
        .collect();
    let loss = f.build(&mut tape, &refs)?;
    tape.backward(loss)?;
    let autodiff: Vec<Vec<f64>> = refs
        .iter()
        .zip(params)
        .map(|(r, p)| {
            tape.grad(*r)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    let mut probe = base.clone();
    for (pi, param) in params.iter().enumerate() {
        let mut param_max = 0.0f64;
        for ei in 0..param.numel() {
            let orig = probe[pi][ei];
            probe[pi][ei] = orig + h;
            let plus = eval(&probe)?;
            probe[pi][ei] = orig - h;
            let minus = eval(&probe)?;
            probe[pi][ei] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ad = autodiff[pi][ei];
            param_max = param_max.max(relative_error(ad, fd));
        }
        per_param.push(param_max);
        max_rel = max_rel.max(param_max);
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_param,
        tol,
        pass: max_rel < tol,
    })
}

/// `|a-b| / max(|a|, |b|)`, falling back to the absolute difference when
/// both magnitudes are tiny. Central differences of a loss `f` carry an
/// absolute noise floor around `eps * |f| / 2h` (~1e-12 for a unit-scale
/// loss at h = 1e-5), so gradients much below 1e-6 cannot be resolved to a
/// meaningful ratio by the probe itself and are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}
