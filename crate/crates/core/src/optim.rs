//! Plain SGD and the mean-squared-error objective.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

/// One SGD step: value <- value - lr * grad for every parameter, then
/// gradients are zeroed. Non-finite gradients abort before any update.
pub fn sgd_step(params: &mut ParameterSet, learning_rate: Real) -> Result<()> {
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(Error::config(format!("bad learning rate {learning_rate}")));
    }
    for e in params.iter() {
        if !e.grad.data().iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient for parameter {}", e.name)));
        }
    }
    for id in 0..params.len() {
        let grad = std::mem::replace(params.grad_mut(id), Tensor::zeros(vec![1]));
        let value = params.value_mut(id);
        for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= learning_rate * g;
        }
        *params.grad_mut(id) = Tensor::zeros(grad.shape().to_vec());
    }
    Ok(())
}

/// Mean over elements of squared differences, with the gradient w.r.t.
/// the prediction: 2 (prediction - target) / numel.
pub fn mse_loss(prediction: &Tensor, target: &Tensor) -> Result<(Real, Tensor)> {
    if prediction.shape() != target.shape() {
        return Err(Error::usage(format!(
            "mse shapes differ: {:?} vs {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let n = prediction.numel() as Real;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(prediction.shape().to_vec());
    for ((&p, &t), g) in prediction.data().iter().zip(target.data()).zip(grad.data_mut()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}
