//! Latent graph diffusion: graphs with augmented edges are encoded into
//! continuous node and pair latents, a denoising diffusion model is trained
//! in that space, and samples are decoded back to graphs. Prediction tasks
//! are handled as conditional generation of the masked part of a graph.

pub mod autoencoder;
pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod latent;
pub mod nn;
pub mod params;
pub mod schedule;
pub mod tensor;
pub mod theory;

pub use error::{LgdError, Result};
pub use latent::LatentGraph;
pub use tensor::Tensor;
