//! Online temporal action localization with a streaming transformer.
//!
//! Each incoming feature chunk is the query of a small transformer whose
//! keys and values are a bounded window of past visual contexts plus a
//! running context embedding. Per-class sigmoid outputs are thresholded
//! online into action instances.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod decoder;
mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
