//! Desk-scale audio self-supervised learning: spectrogram frontends, a
//! gated-attention ViT encoder, masked latent regression with an EMA
//! teacher, convex gated probing of frozen layer stacks, and the metrics and
//! tooling needed to run all of it reproducibly on a CPU.

pub mod encoder;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod pretrain;
pub mod probe;
pub mod rng;

pub use error::{Error, Result};
