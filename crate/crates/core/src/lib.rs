//! Diffusion-autoencoder image tokenizer at desk scale.
//!
//! Images are encoded by a dual-stream transformer into a short 1-D latent, binarized
//! (lookup-free quantization) and reconstructed by a rectified-flow decoder. Training
//! runs in two tokenizer stages (flow-matching pre-training, then post-training through
//! the sampling chain) plus a masked-token generator over the packed token ids.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod error;
pub mod flow;
pub mod model;
pub mod nn;
pub mod plot;
pub mod quantizer;
pub mod sampler;
pub mod stage2;
pub mod trainer;

pub use error::{Error, Result};
