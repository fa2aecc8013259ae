//! Central finite-difference gradient verification.
//!
//! Programs are written against `Tape<f64>` so both the analytic gradient and
//! the finite differences are evaluated at double precision.

use crate::error::{Error, Result};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-3;
/// Upper bound on the total number of perturbed elements.
pub const MAX_ELEMENTS: usize = 10_000;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar program with central differences
/// taken over every element of every input.
///
/// `program` receives a fresh tape and one leaf per input, and must return a
/// scalar. `fault` injects a sign flip into one backward rule for the
/// analytic pass only.
pub fn grad_check<F>(inputs: &[Tensor<f64>], epsilon: f64, fault: Option<OpKind>, program: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let elements: usize = inputs.iter().map(Tensor::numel).sum();
    if elements > MAX_ELEMENTS {
        return Err(Error::Config(format!(
            "grad_check over {elements} elements exceeds the limit of {MAX_ELEMENTS}"
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("grad_check epsilon must be positive, got {epsilon}")));
    }

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_sign_fault(kind);
    }
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.detached().with_requires_grad()))
        .collect();
    let root = program(&mut tape, &vars)?;
    tape.value(root)?.check_finite("grad_check program output")?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| Ok(tape.grad(v)?.map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)))
        .collect::<Result<_>>()?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = program(&mut tape, &vars)?;
        let v = tape.value(root)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check perturbed evaluation".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements,
    };
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detached).collect();
    for (ti, grads) in analytic.iter().enumerate() {
        for ei in 0..work[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + epsilon;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - epsilon;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(grads[ei], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
                report.analytic = grads[ei];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn polynomial_program_passes() {
        let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let r = grad_check(&[x], DEFAULT_EPSILON, None, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let cube = t.mul(sq, v[0])?;
            t.sum(cube)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn sign_fault_detected() {
        let x = Tensor::new(&[2], vec![0.5, 1.5]).unwrap();
        let r = grad_check(&[x], DEFAULT_EPSILON, Some(OpKind::Tanh), |t, v| {
            let y = t.tanh(v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error > 1.0);
    }

    #[test]
    fn oversized_input_rejected() {
        let x = Tensor::<f64>::zeros(&[MAX_ELEMENTS + 1]).unwrap();
        assert!(grad_check(&[x], DEFAULT_EPSILON, None, |t, v| t.sum(v[0])).is_err());
    }
}
