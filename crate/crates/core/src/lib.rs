//! Unsupervised low-light enhancement with neural-representation normalization
//! and text-guided appearance critics.

pub mod datasets;
pub mod error;
pub mod generators;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod nrn;
pub mod optim;
pub mod tad;
pub mod trainer;

pub use error::{Error, Result};
