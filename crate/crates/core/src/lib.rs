//! Sparse mixture-of-experts layers with hypernetwork-generated experts,
//! built on a small reverse-mode autodiff tape.

pub mod compress;
pub mod error;
pub mod harness;
pub mod hyper;
pub mod moe;
pub mod tensor;

pub use error::{Error, Result};
