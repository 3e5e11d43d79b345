//! Minimal tensor, autodiff, and optimiser machinery for the desk-scale
//! models. Everything runs in `f64` on the CPU.

pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
pub mod roi;
mod tensor;

pub use graph::{
    bce_with_logits, conv_out_size, log_sum_exp, sigmoid, smooth_l1, softmax, Graph, NodeGrads,
    Var,
};
pub use layers::{ChannelProjection, Conv2d, Linear, Mode};
pub use optim::Sgd;
pub use params::{Gradients, ParamId, ParamStore, CHECKPOINT_VERSION};
pub use roi::RoiWeights;
pub use tensor::Tensor;

#[cfg(test)]
mod graph_tests;
