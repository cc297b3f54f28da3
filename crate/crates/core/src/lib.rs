pub mod data;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, Network, Variant};
pub use tensor::{Real, Tape, Tensor, Var};
