//! Multi-modal recommendation with interaction-guided diffusion denoising of
//! content embeddings, total-correlation alignment across the interaction,
//! visual and textual channels, and similarity-gated residual fusion.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, run
//! directories and the command line live in the `gtc` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod tc;
pub mod train;

pub use config::{TrainConfig, Variant};
pub use dataset::{ContentFeatures, InteractionDataset, NormalizedAdjacency, SplitTag};
pub use error::{Error, Result};
pub use linalg::{CsrMatrix, Matrix};

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a [`Rng`]; distinct `stream` values give independent sequences.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
