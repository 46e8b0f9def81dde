//! Central finite-difference gradient checker.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter index, coordinate)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub value: f64,
}

/// Compares the tape gradient of `f` with central differences
/// `(f(θ + eps e) - f(θ - eps e)) / (2 eps)` for every coordinate of every
/// tensor in `params`.
///
/// `f` records a scalar loss on the given tape from the bound parameters.
/// It must be a deterministic function of the parameter values; two
/// evaluations at the unperturbed point are compared bit-for-bit and a
/// mismatch is reported as [`Error::Determinism`]. Parameters are restored
/// on return.
pub fn grad_check<F>(mut f: F, params: &mut [Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Range {
            what: "grad_check eps",
            value: eps,
            range: "(0, inf)",
        });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, true)).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let again = evaluate(&mut f, params)?;
    if again.to_bits() != value.to_bits() {
        return Err(Error::Determinism {
            first: value,
            second: again,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        value,
    };
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + eps;
            let plus = evaluate(&mut f, params);
            params[pi].data_mut()[ci] = orig - eps;
            let minus = evaluate(&mut f, params);
            params[pi].data_mut()[ci] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(f: &mut F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, true)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}
