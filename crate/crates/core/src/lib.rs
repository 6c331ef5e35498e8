pub mod cli;
pub mod dataset;
pub mod error;
pub mod network;
pub mod planner;
pub mod projection;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{Graph, Network};
pub use tensor::Tensor;
