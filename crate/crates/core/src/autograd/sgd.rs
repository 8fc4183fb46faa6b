use super::tensor::Tensor;
use crate::{Error, Result};

/// Plain gradient descent, `p ← p − lr·g`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch(format!(
            "sgd parameter {:?} with gradient {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}
