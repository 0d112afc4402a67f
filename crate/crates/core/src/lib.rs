//! Chunked video-diffusion inference with shifted chunking and partial
//! evaluation from a deep-feature cache.

mod error;

pub mod cache;
pub mod cli_io;
pub mod denoiser;
pub mod diffusion;
pub mod metrics;
pub mod numerics;
pub mod pose_select;
pub mod scheduler;

pub use error::{Error, Result};
