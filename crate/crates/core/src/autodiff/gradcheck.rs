//! Central-difference gradient oracle.

use super::{Tape, Tensor, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares the tape gradient of `f` at `point` against central differences
/// with step `h`, returning the worst relative error.
pub fn finite_difference_check<F, E>(f: F, point: &[Tensor], h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    finite_difference_report(f, point, h).map(|r| r.max_rel_error)
}

pub fn finite_difference_report<F, E>(f: F, point: &[Tensor], h: f64) -> Result<FdReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(TensorError::BadStep(h).into());
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(TensorError::NonFinite {
            input: 0,
            index: 0,
            value: base,
        }
        .into());
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(tape);

    let eval = |probe: &[Tensor], input: usize, index: usize| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { input, index, value }.into());
        }
        Ok(value)
    };

    let mut probe: Vec<Tensor> = point.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        coordinates: 0,
    };
    for input in 0..point.len() {
        for index in 0..point[input].numel() {
            let x0 = point[input].data()[index];
            probe[input].data_mut()[index] = x0 + h;
            let plus = eval(&probe, input, index)?;
            probe[input].data_mut()[index] = x0 - h;
            let minus = eval(&probe, input, index)?;
            probe[input].data_mut()[index] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[input].data()[index] - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = input;
                report.worst_index = index;
            }
        }
    }
    Ok(report)
}
