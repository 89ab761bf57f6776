//! Cross-modal generative pre-training for image captioning.

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod corruption;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod representation;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod vocab;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, Session, SharedTransformer};
pub use params::{ParamGrads, ParamStore, Parameter};
pub use representation::RegionSet;
pub use tensor::Tensor;
