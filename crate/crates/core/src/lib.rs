pub mod align;
pub mod bc_signal;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod timefmt;
pub mod vision;

pub use scalar::Scalar;
pub use error::{Error, Result};

pub type Dataset = dataset::Dataset<f64>;
pub type Model = model::Model<f64>;
pub type GbtModel = model::GbtModel<f64>;
pub type ForestModel = model::ForestModel<f64>;
pub type LinearModel = model::LinearModel<f64>;
