//! Structured filter pruning driven by activation-pattern overlap.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the
//! algorithmic parts: a small dense tensor engine with forward and backward
//! passes, a prunable network graph with coupling groups, the expressiveness
//! (NEXP) and importance scoring criteria, the iterative pruning loop,
//! scoring-batch sampling and map-similarity analysis.
//!
//! File formats, the command-line front end and the experiment drivers live
//! in the companion `nexp` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod arch;
pub mod bits;
pub mod coupling;
pub mod engine;
mod error;
pub mod graph;
pub mod layer;
pub mod profile;
pub mod prune;
pub mod rng;
pub mod sampling;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Network, Node, Source};
pub use layer::Layer;
pub use tensor::Tensor;
