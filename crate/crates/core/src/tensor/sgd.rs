//! Plain stochastic gradient descent with optional weight decay.

use crate::scalar::Scalar;

use super::{Tensor, TensorError};

/// In-place update `p <- p - lr * (g + wd * p)`.
pub fn sgd_step<S: Scalar>(
    param: &mut Tensor<S>,
    grad: &Tensor<S>,
    learning_rate: S,
    weight_decay: S,
) -> Result<(), TensorError> {
    if param.shape() != grad.shape() {
        return Err(TensorError::DimensionMismatch {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data().iter()) {
        *p = *p - learning_rate * (g + weight_decay * *p);
    }
    Ok(())
}
