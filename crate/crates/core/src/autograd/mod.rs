//! Minimal reverse-mode differentiation over 64-bit tensors.
//!
//! Only the operations the heart-rate network uses are provided: same-padded
//! 1-D convolution, batch normalization, relu, max pooling, dropout, dense
//! layers, concatenation/slicing, gate nonlinearities, a stacked LSTM built
//! from those, and the mean-absolute-error loss.
//!
//! ```
//! use ppgnet::autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap(), true);
//! let x = g.constant(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
//! let y = g.linear(x, w, None).unwrap();
//! let loss = g.mae_loss(y, &[0.0]).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[-2.0, -3.0]);
//! ```

mod conv;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod lstm;
mod norm;
mod pool;
mod sgd;
pub mod suite;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{BatchNormMode, Fault, Graph, Var};
pub use lstm::{lstm_forward, LstmLayer, LstmLayerVars, LstmOutput};
pub use norm::{BatchNormState, BatchStats};
pub use sgd::sgd_step;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
