//! Gradient checking against central finite differences.

use super::{finite_difference_gradient, gradient, Graph, Result, Tensor, Var};

/// A differentiable scalar function of one tensor.
pub type ScalarFn<'a> = dyn for<'g> Fn(Var<'g>) -> Result<Var<'g>> + 'a;

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂), or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reverse-mode gradient of `f` at `point`, as plain values.
pub fn analytic_gradient(f: &ScalarFn<'_>, point: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let x = g.param(point.clone());
    let y = f(x)?;
    let grads = gradient(y, &[x], false)?;
    Ok((*grads.wrt(x).value()).clone())
}

/// Relative error between the analytic and finite-difference gradients of `f`.
pub fn check_first_order(f: &ScalarFn<'_>, point: &Tensor, epsilon: f64) -> Result<f64> {
    let analytic = analytic_gradient(f, point)?;
    let numeric = finite_difference_gradient(
        |p| {
            let g = Graph::new();
            Ok(f(g.constant(p.clone()))?.item())
        },
        point,
        epsilon,
    )?;
    Ok(relative_error(analytic.data(), numeric.data()))
}

/// Second-order check: differentiates `h(x) = ⟨direction, ∇f(x)⟩` through the
/// recorded backward pass and compares with finite differences of the
/// first-order gradient.
pub fn check_second_order(f: &ScalarFn<'_>, point: &Tensor, direction: &Tensor, epsilon: f64) -> Result<f64> {
    let analytic = {
        let g = Graph::new();
        let x = g.param(point.clone());
        let y = f(x)?;
        let first = gradient(y, &[x], true)?.wrt(x);
        let h = first.mul(g.constant(direction.clone()))?.sum()?;
        let second = gradient(h, &[x], false)?;
        (*second.wrt(x).value()).clone()
    };
    let numeric = finite_difference_gradient(
        |p| {
            let first = analytic_gradient(f, p)?;
            Ok(first.data().iter().zip(direction.data()).map(|(a, b)| a * b).sum())
        },
        point,
        epsilon,
    )?;
    Ok(relative_error(analytic.data(), numeric.data()))
}
