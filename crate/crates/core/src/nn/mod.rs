//! Layer graphs for the classifier and generator, with batch-norm capture
//! and a frozen store of pretrained statistics.

mod bn_store;
mod checkpoint;
mod graph;
mod model;
mod resnet;

pub use bn_store::{BnLayerStats, BnStore};
pub use checkpoint::{
    load_checkpoint, read_header, save_checkpoint, Header, TensorEntry, TensorRole, MAGIC,
};
pub use graph::{Activation, GraphBuilder, Init, Layer, LayerKind};
pub use model::{BnBatchStats, Bound, ForwardCapture, ForwardOptions, ForwardOutput, Model};
pub use resnet::{build_resnet, ResnetDepth, ResnetSpec};

use serde::{Deserialize, Serialize};

use crate::lrg::GeneratorSpec;

/// What a layer graph was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Resnet(ResnetSpec),
    Generator(GeneratorSpec),
    /// Hand-assembled graph.
    Custom,
}
