//! Synthetic angle-wedge sequences, CSV manifests and eye-grouped splits.

mod manifest;
mod split;
mod synth;

pub use manifest::{load_samples, DatasetManifest, ManifestEntry, SequenceSample, MANIFEST_FILE, MANIFEST_HEADER};
pub use split::split_grouped;
pub use synth::{
    generate_synthetic, measure_aperture, render_sequence, write_dataset, GeneratedDataset, GeneratorConfig, SequenceGeometry, CLASS_NAMES,
    GENERATOR_FILE,
};
