//! Deep compositional networks: convolutional layers whose filters are
//! explicit weighted sums of discretized 2D Gaussian components.

pub mod bench;
pub mod comp_layer;
pub mod config;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod maxflow;
pub mod model_file;
pub mod network;
pub mod optim;
pub mod pgm;
pub mod prune;
pub mod tensor;
pub mod viz;

pub use error::{DcnError, Result};
