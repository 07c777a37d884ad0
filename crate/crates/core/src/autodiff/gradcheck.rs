//! Central finite-difference checks for tape operations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Contracts a non-scalar output with fixed pseudo-random weights so every
/// output element contributes to the checked scalar.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ shape.iter().product::<usize>() as u64);
    let weights = Tensor::new(shape.clone(), (0..shape.iter().product()).map(|_| rng.random_range(0.5..1.5)).collect());
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = reduce(&mut tape, out)?;
    Ok(tape.value(s).item())
}

/// Compares the tape's analytic gradient of `f` against central differences
/// with step `epsilon` for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = reduce(&mut tape, out)?;
    let grads = tape.backward(s)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tolerance,
        checked: 0,
        failures: Vec::new(),
    };
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[i].shape());
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + epsilon;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[e] = orig - epsilon;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[e];
            let err = rel_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= tolerance || !err.is_finite() {
                report.failures.push(GradMismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let r = grad_check(|_, v| Ok(v[0]), &[x], 1e-5, 1e-4).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn reports_a_wrong_gradient() {
        // relu at exactly zero: analytic 0, numeric 0.5
        let x = Tensor::from_vec(vec![0.0]);
        let r = grad_check(|t, v| Ok(t.relu(v[0])), &[x], 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures[0].element, 0);
    }
}
