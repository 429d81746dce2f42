//! Zero-shot generative network quantization.
//!
//! A pretrained full-precision classifier supplies batch-norm statistics and
//! features that steer a conditional generator with long-range attention;
//! the synthetic images it produces then drive fine-tuning of a fake-quantized
//! copy of the classifier.

pub mod data;
pub mod error;
pub mod losses;
pub mod lrg;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
