//! Defensively distilled classifiers and the L0 saliency attacks used to
//! evaluate them.

pub mod attack;
pub mod error;
pub mod experiment;
pub mod io;
pub mod layers;
pub mod network;
pub mod softmax;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::LayerSpec;
pub use network::{Architecture, Forward, ForwardCache, Gradients, Network, OutputSpace, Params};
pub use softmax::{softmax_t, Temperature};
pub use tensor::Tensor;
