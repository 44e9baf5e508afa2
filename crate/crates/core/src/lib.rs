//! Prompt-based spatio-temporal graph transfer learning.
//!
//! A masked spatio-temporal graph autoencoder is pre-trained on source
//! domains, then adapted to a data-scarce target domain by fitting small
//! prompt banks while the backbone stays frozen: first domain prompts on the
//! encoder input, then per-task prompts on the decoder input. Forecasting,
//! kriging and extrapolation are all expressed as reconstruction of masked
//! patches.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod evalbench;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompting;
pub mod structure;

pub use checkpoint::{Checkpoint, Stage};
pub use config::{BankMode, TrainConfig};
