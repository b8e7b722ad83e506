//! Central finite-difference verification of autodiff gradients.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator
/// so that exact zeros compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares autodiff gradients of a scalar function against central
/// differences `(f(x+h·e) − f(x−h·e)) / 2h`, coordinate by coordinate, for
/// every input tensor.
///
/// The function may use any error type that tensor errors convert into.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> std::result::Result<Var<'g>, E>,
    E: From<TensorError>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars)?;
        if loss.value().numel() != 1 {
            return Err(TensorError::Contract {
                op: "grad_check",
                msg: "function must be scalar-valued".into(),
            }
            .into());
        }
        g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> std::result::Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?.value().to_scalar()?;
        Ok(out)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        tol,
        passed: true,
    };
    for (ti, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let x0 = input.data()[c];
            work[ti].data_mut()[c] = x0 + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[c] = x0 - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, c));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    type R<'g> = Result<Var<'g>, TensorError>;

    /// `x · stop(x)`: analytic gradient x, numeric gradient 2x.
    fn half_detached<'g>(g: &'g Graph, v: &[Var<'g>]) -> R<'g> {
        let c = g.constant((*v[0].value()).clone());
        v[0].mul(&c)?.sum_all()
    }

    fn flat<'g>(_: &'g Graph, v: &[Var<'g>]) -> R<'g> {
        v[0].scale(0.0)?.sum_all()
    }

    fn identity<'g>(_: &'g Graph, v: &[Var<'g>]) -> R<'g> {
        Ok(v[0])
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let r = grad_check(half_detached, &[Tensor::vector(vec![1.0, -2.0])], 1e-5, 1e-6).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn zero_gradients_use_the_absolute_floor() {
        let r = grad_check(flat, &[Tensor::vector(vec![3.0])], 1e-4, 1e-9).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_abs_error, 0.0);
    }

    #[test]
    fn rejects_non_scalar_functions() {
        assert!(grad_check(identity, &[Tensor::vector(vec![1.0, 2.0])], 1e-4, 1e-6).is_err());
    }
}
