//! Dense feed-forward networks: forward pass, reverse-mode gradients, Adam
//! training with early stopping, and finite-difference gradient checks.

mod gradcheck;
mod network;
mod train;

pub use gradcheck::{gradcheck, gradcheck_with, GradcheckReport, ParamLocation};
pub use network::{
    gaussian_nll, mse, sigmoid, softplus, Activation, ForwardCache, Gradients, Head, Layer, LayerDoc,
    Network, NetworkDoc, NetworkSpec, NETWORK_FORMAT, SIGMA_FLOOR,
};
pub use train::{train, train_with, AdamParams, TrainConfig, TrainHistory};
