//! Central finite-difference verification of tape gradients.

use super::tape::{AdjointFault, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates to probe; all of them when `None`.
    pub coords: Option<Vec<usize>>,
    pub fault: Option<AdjointFault>,
}

impl GradCheckOptions {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            coords: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over probed coordinates.
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
}

/// Max relative error between the tape gradient of `f` at `point` and central
/// differences with the given step.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, point, &GradCheckOptions::with_step(step)).map(|r| r.max_error)
}

pub fn grad_check_with<F>(f: F, point: &Tensor, options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_adjoint_fault(options.fault.clone());
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let value = tape.value(y).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check: function value at the base point".into(),
        });
    }
    let analytic = tape.backward(y)?.get_or_zeros(x, point);

    let eval = |p: Tensor, index: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: format!("grad_check: function value with coordinate {index} perturbed"),
            })
        }
    };

    let all: Vec<usize>;
    let coords = match &options.coords {
        Some(c) => c.as_slice(),
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probed: 0,
    };
    for &i in coords {
        if i >= point.numel() {
            return Err(Error::invalid(
                "grad_check",
                format!("coordinate {i} out of range for {} elements", point.numel()),
            ));
        }
        let mut plus = point.clone();
        plus.data_mut()[i] += options.step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= options.step;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * options.step);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check: analytic gradient at coordinate {i}"),
            });
        }
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        report.probed += 1;
        if err > report.max_error || report.probed == 1 {
            report.max_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let err = grad_check(|t, x| t.square(x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn non_finite_reported_with_coordinate() {
        // exp(1) * 1e309 overflows
        let p = Tensor::vector(vec![1.0, 0.0]);
        let err = grad_check(
            |t, x| {
                let e = t.exp(x)?;
                let l = t.scale(e, 1e308)?;
                let l = t.scale(l, 10.0)?;
                t.sum(l)
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn scaled_adjoint_is_caught() {
        // x^4 through two chained muls: the fault compounds to 1.01^2
        let f = |t: &mut Tape, x: Var| {
            let x2 = t.mul(x, x)?;
            let x4 = t.mul(x2, x2)?;
            t.sum(x4)
        };
        let p = Tensor::vector(vec![1.3, -0.7, 2.1]);
        let clean = grad_check(f, &p, 1e-5).unwrap();
        assert!(clean < 1e-6);
        let opts = GradCheckOptions {
            fault: Some(AdjointFault { op: "mul", factor: 1.01 }),
            ..GradCheckOptions::with_step(1e-5)
        };
        let faulty = grad_check_with(f, &p, &opts).unwrap();
        assert!(faulty.max_error > 1e-2, "{faulty:?}");
    }
}
