//! On-disk formats: tensors, corpus manifests, checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use manifest::{load_corpus, read_manifest, write_corpus, write_manifest, LoadedCorpus, ManifestRecord};
pub use tensor::{read_tensor, write_tensor, Tensor};
