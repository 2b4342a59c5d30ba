//! Central finite-difference verification of tape gradients.

use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::{OanError, Result};
use crate::scalar::Scalar;

/// Denominator floor for the relative error, so entries where both
/// gradients vanish compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, entry)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub entries: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(OanError::Shape {
            op: "grad_check",
            left: tape.shape(out),
            right: (1, 1),
        });
    }
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(OanError::Numeric("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar `f` against central finite
/// differences over every entry of every input.
///
/// All inputs are recorded as differentiable leaves. The relative error of an
/// entry is `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], step: T, tolerance: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(step > T::zero() && step <= T::lit(1e-2)) {
        return Err(OanError::config(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let inputs: Vec<Tensor<T>> = inputs.iter().map(|t| t.detached().with_grad()).collect();

    let first = eval(&f, &inputs)?;
    let second = eval(&f, &inputs)?;
    if first != second {
        return Err(OanError::Determinism {
            first: first.as_f64(),
            second: second.as_f64(),
        });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).item() != first {
        return Err(OanError::Determinism {
            first: first.as_f64(),
            second: tape.value(out).item().as_f64(),
        });
    }
    tape.backward(out)?;

    let two_h = step + step;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        entries: 0,
        tolerance: tolerance.as_f64(),
        passed: true,
    };
    let mut probe = inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("leaf requires grad").to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + step;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig - step;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig;

            let numeric = ((plus - minus) / two_h).as_f64();
            let a = a.as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.entries += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, e));
            }
        }
    }
    report.passed = report.max_rel_err <= report.tolerance;
    Ok(report)
}
