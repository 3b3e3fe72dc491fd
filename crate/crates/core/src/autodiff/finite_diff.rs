use super::{AdError, Result, Tensor};

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn finite_difference_gradient<F>(mut f: F, point: &Tensor, epsilon: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(AdError::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let shape = point.shape().to_vec();
    let mut probe = point.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let x = probe[i];
        probe[i] = x + epsilon;
        let up = f(&Tensor::new(shape.clone(), probe.clone())?)?;
        probe[i] = x - epsilon;
        let down = f(&Tensor::new(shape.clone(), probe.clone())?)?;
        probe[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(AdError::NonFinite {
                op: "finite_difference",
            });
        }
        grad.push((up - down) / (2.0 * epsilon));
    }
    Tensor::new(shape, grad)
}
