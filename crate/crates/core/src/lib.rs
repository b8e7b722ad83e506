//! Memory-augmented transformer world models at desk scale.
//!
//! A frozen convolutional codec maps 32×32 observations of a procedurally
//! generated two-room maze to latent token grids. A small causal ViT predicts
//! the next latent frame; its context is extended by one of three memory
//! encoders (frame cache, selective state-space recurrence, test-time trained
//! neural memory) whose readout enters the residual stream through one of five
//! injectors.

mod binio;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inject;
pub mod maze;
pub mod memory;
pub mod nn;
pub mod optim;
pub mod predictor;

pub use error::{Error, Result};
