//! Central-difference gradient checking in float64.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of scalar `f` at `x` with central
/// differences.
pub fn finite_diff_check<Func>(f: Func, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), tol)
}

/// Like [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<Func>(f: Func, xs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        let v = g.value(y);
        if v.len() != 1 {
            return Err(Error::Backward(format!("gradcheck needs a scalar function, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let grads = g.backward(y)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol,
    };
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .ok_or_else(|| Error::Backward(format!("input {i} received no gradient")))?
            .clone();
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{BackwardOp, Real};

    #[test]
    fn sum_checks_exactly() {
        let x = Tensor::from_vec(vec![0.3, -1.0, 2.0]);
        let r = finite_diff_check(|g, v| g.sum(v), &x, 1e-4).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    struct WrongSquare;

    impl<F: Real> BackwardOp<F> for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }

        fn backward(
            &self,
            inputs: &[&Tensor<F>],
            _output: &Tensor<F>,
            grad: &Tensor<F>,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor<F>>>> {
            // Deliberately off by a factor of two.
            let mut d = inputs[0].clone();
            for (a, &g) in d.data_mut().iter_mut().zip(grad.data()) {
                *a *= g;
            }
            Ok(vec![Some(d)])
        }
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let x = Tensor::from_vec(vec![0.5, 1.5]);
        let r = finite_diff_check(
            |g, v| {
                let sq = g.value(v).map(|a| a * a);
                let y = g.record(&[v], sq, Box::new(WrongSquare))?;
                g.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
    }
}
