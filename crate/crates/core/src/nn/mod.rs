//! Differentiable networks: the generator (audio encoder, pose-variant
//! encoder, U-Net decoder), the pose-invariant encoder and the displacement
//! discriminator.

mod checkpoint;
mod kernels;
mod model;
mod params;
mod tape;
mod tensor;

pub mod gradcheck;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{
    audio_encoder, decoder, discriminator, generator, piv_encoder, pv_encoder, spectrogram_batch, AudioEncoding,
    Conditioning, GeneratorInputs,
};
pub use params::{Bound, ModelConfig, ModelParams, Network, ParamSet};
pub use tape::{Conv1dGeom, Conv2dGeom, Grads, Tape, Var};
pub use tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

#[cfg(test)]
mod tests;
