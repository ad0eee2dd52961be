//! Synthetic machine sounds, dataset layout, and file formats.

mod dataset;
mod synth;
mod tensorfile;

pub use dataset::{build_corpus, read_dataset, read_manifest, CorpusConfig, Dataset, ManifestEntry, Split, MANIFEST};
pub use synth::{default_specs, synth_clip, AnomalyRecipe, SynthMachineSpec};
pub use tensorfile::{decode, encode, find, tensor_read, tensor_write, FOOTER, MAGIC, VERSION};
