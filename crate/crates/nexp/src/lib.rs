//! File formats, experiment drivers and the command-line front end for
//! [`nexp_core`].

pub mod checkpoint;
pub mod data;
mod error;
pub mod experiment;
pub mod report;

pub use error::{Error, Result};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 2;
    /// The pruning target was not reached.
    pub const SHORTFALL: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}
