pub mod bench;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{Locater, Segmenter};
pub use numerics::{ParamTree, Tensor};
