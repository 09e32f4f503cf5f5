//! Hallucinator-basis dataset factorization.
//!
//! A training set is distilled into a few labelled bases and small hallucinator networks whose
//! pairwise compositions form the synthetic training images. The crate covers data loading and
//! whitening, the network zoo, the factorization itself, the losses of the adversarial game, the
//! pluggable matching objectives, the outer distillation loop, downstream evaluation, and the
//! `HABA` checkpoint format.

pub mod dataio;
pub mod ddmatch;
pub mod distill;
pub mod error;
pub mod evalharness;
pub mod export;
pub mod factor;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod store;

pub use error::{Error, Result};
