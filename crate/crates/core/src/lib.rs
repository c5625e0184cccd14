//! Causal spiking audio-visual speech recognition.
//!
//! A visual subnet turns event-camera voxels into a per-timestep cue, which
//! drives masked cross-attention inside a spiking speech subnet. Everything
//! runs on a small reverse-mode tape with surrogate gradients.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod frontend;
pub mod layers;
pub mod model;
pub mod neurons;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vca2m;

pub use error::{Error, Result};
pub use model::{AvModel, FusionMode, ModelInput, NetworkConfig};
pub use neurons::{LifParams, NeuronState, SpikeMode};
pub use tape::Tape;
pub use tensor::{SpikeTensor, Tensor};
