//! Conditional image generator with long-range attention blocks.

mod attention;
mod dump;
mod generator;

pub use attention::{lra_forward, lra_map, Gate, LraSpec, LraWeights};
pub use dump::{load_dump, write_dump, write_ppm_grid, DumpManifest};
pub use generator::{
    build_generator, generate_batch, sample_labels, sample_noise, Generator, GeneratorSpec,
    LabelPolicy, NUM_BLOCKS,
};
