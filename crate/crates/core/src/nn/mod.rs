//! Tensors, a layer graph with analytic gradients, Adam, gradient checking
//! and the `FQAL` parameter file format.

pub mod format;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, input_grad_check, mse_loss};
pub use network::{Gradients, Network, NetworkBuilder, NodeId, Op, Param, Trace};
pub use optim::OptimizerState;
pub use tensor::{images_to_tensor, tensor_to_image, Tensor};
