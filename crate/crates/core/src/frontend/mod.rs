//! Sensor-side processing: event streams, audio features, datasets.

pub mod audio;
pub mod dataset;
pub mod events;
pub mod synth;

pub use audio::{augment_audio, fbank, mix_at_snr, standardize_frames, AudioWave, FbankFeatures};
pub use dataset::{prepare, Dataset, ManifestDataset, RawSample};
pub use events::{augment_visual, voxelize, voxelize_window, Event, EventStream, EventVoxelGrid};
pub use synth::{synth_dataset, SynthSet, SynthSpec};
