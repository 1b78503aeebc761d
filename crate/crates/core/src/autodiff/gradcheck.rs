//! Central finite-difference gradient checking.
//!
//! The oracle only ever evaluates forward values, so it stays independent of
//! the backward rules it is used to verify.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors. Components smaller than this compare
/// by absolute error instead: with h = 1e-5 and losses of order one, central
/// differences carry round-off near 1e-10, which would swamp the relative
/// error of a 1e-6 gradient entry.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central difference `(f(x+h) − f(x−h)) / 2h` for every coordinate of `point`.
pub fn finite_difference(point: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let plus = f(&x)?;
        x[i] = point[i] - h;
        let minus = f(&x)?;
        x[i] = point[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Checks the gradient of a scalar graph function with respect to every element of `inputs`.
///
/// `build` receives a fresh graph and one differentiable leaf per input, and returns the loss.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Vec<f64>], requires_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let leaves = inputs
            .iter()
            .zip(values)
            .map(|(t, v)| g.input(t.shape(), v.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &leaves)?;
        if g.value(loss).len() != 1 {
            return Err(Error::Usage("gradient check needs a scalar loss".into()));
        }
        let value = g.scalar(loss);
        if !requires_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let per_input = leaves
            .iter()
            .zip(values)
            .map(|(&l, v)| grads.wrt(l).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]))
            .collect();
        Ok((value, per_input))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let (_, analytic) = eval(&base, true)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: (0, 0), checked: 0 };
    for (which, input) in base.iter().enumerate() {
        let numeric = finite_difference(input, h, |x| {
            let mut values = base.clone();
            values[which] = x.to_vec();
            eval(&values, false).map(|(v, _)| v)
        })?;
        for (k, (&a, &n)) in analytic[which].iter().zip(&numeric).enumerate() {
            let rel = relative_error(a, n);
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (which, k);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_quadratic() {
        let d = finite_difference(&[3.0, -1.0], 1e-5, |x| Ok(x[0] * x[0] + 2.0 * x[1])).unwrap();
        assert!((d[0] - 6.0).abs() < 1e-8);
        assert!((d[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.01) - 0.01 / 1.01).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-4).abs() < 1e-15);
    }
}
