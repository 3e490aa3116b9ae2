//! Volumes, dataset manifests, checkpoints and synthetic phantoms.

mod checkpoint;
mod manifest;
mod synth;
mod volume;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use manifest::{
    load_dataset, manifest_path, read_manifest, write_dataset, DatasetManifest, ManifestEntry, DATASET_FORMAT,
    DATASET_VERSION, MANIFEST_FILE,
};
pub use synth::{class_counts, synth_dataset, synth_volume, SynthSpec};
pub use volume::{
    decode_volume, encode_volume, load_volume, network_input, rescale_intensity, save_volume, stack_volumes, RescaleInfo, Volume,
    VOLUME_FORMAT, VOLUME_VERSION,
};
