//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |a - n| / max(1e-8, |a| + |n|)` over every coordinate.
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub coords: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the tape's analytic gradient of a scalar function against
/// central differences `(f(θ+ε) - f(θ-ε)) / 2ε`, one coordinate at a time.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must be
/// deterministic (no dropout).
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new().with_finite_checks(true);
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_coord: 0,
        coords: 0,
    };
    let mut probe = params.to_vec();
    for (p, grads) in analytic.iter().enumerate() {
        for (c, &a) in grads.iter().enumerate() {
            let orig = probe[p].data()[c];
            probe[p].data_mut()[c] = orig + eps;
            let plus = eval(&probe)?;
            probe[p].data_mut()[c] = orig - eps;
            let minus = eval(&probe)?;
            probe[p].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = p;
                report.worst_coord = c;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = x^T A x with A = [[2, 1], [1, 3]]
        let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![0.7, -1.3]).unwrap();
        let check = finite_diff_check(
            |tape, v| {
                let a = tape.constant(a.clone());
                let ax = tape.matmul(a, v[0])?;
                let prod = tape.mul(ax, v[0])?;
                tape.reduce_sum(prod)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-8, "{check:?}");
        assert_eq!(check.coords, 2);
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let x = Tensor::new(vec![3], vec![0.5, 1.0, -2.0]).unwrap();
        let check = finite_diff_check(
            |tape, v| {
                let y = tape.elementwise(v[0], |t| t * t, |t| 3.0 * t)?;
                tape.reduce_sum(y)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(check.max_rel_error > 0.1);
    }
}
