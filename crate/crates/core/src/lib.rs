//! Spatially recurrent segmentation networks on the CPU.
//!
//! The crate provides a small dense tensor type, convolutional layers,
//! bidirectional LSTM/IRNN sweeps over image grids, reverse-mode
//! differentiation over a static graph, three network builders (a purely
//! recurrent net, a dilated FCN and the FCN with an inserted recurrent group),
//! a dense mean-field CRF, data handling and a training/evaluation harness.

pub mod autograd;
pub mod config;
pub mod data;
pub mod densecrf;
pub mod error;
pub mod harness;
pub mod layers;
pub mod models;
pub mod renet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
