//! ViG networks: images as graphs of patch nodes, processed by Grapher and FFN blocks.

pub mod analysis;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use autograd::{grad_check, Gradients, Tape, Var};
pub use error::{Result, VigError};
pub use tensor::{DType, Element, Tensor};
