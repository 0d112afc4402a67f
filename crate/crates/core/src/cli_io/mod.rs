//! Configuration, file formats and the command line.

pub mod bench;
pub mod cli;
pub mod config;
pub mod keypoints;
pub mod latent_file;
pub mod pgm;

pub use config::{ConfigFile, DenoiserKind, LatentDims, Resolved};
pub use keypoints::KeypointsFile;
pub use latent_file::{load_latents, save_latents};
