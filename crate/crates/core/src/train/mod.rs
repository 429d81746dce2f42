//! Pretraining, data generation and quantized fine-tuning.

mod config;
mod optim;
mod run;

pub use config::*;
pub use optim::*;
pub use run::*;
