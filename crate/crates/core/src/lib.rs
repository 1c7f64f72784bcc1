pub mod ablation;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod experiment;
pub mod model;
pub mod numcore;
pub mod oracle;
pub mod prompting;
pub mod synthdata;
pub mod training;
pub mod verify;

pub use error::{DataError, Error, Result};

/// Double-precision instantiations used by the tools and acceptance checks.
pub type Tensor = numcore::Tensor<f64>;
pub type Graph = numcore::Graph<f64>;
pub type ParamStore = numcore::ParamStore<f64>;
pub type DualEncoder = model::DualEncoder<f64>;
pub type PromptBasis = prompting::PromptBasis<f64>;
pub type PairedData = training::PairedData<f64>;
pub type EvalSet = training::EvalSet<f64>;
pub type VideoBatch = encoders::VideoBatch<f64>;
