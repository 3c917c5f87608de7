//! Learned visual odometry, embedding-distance mapping and relocalization.

mod binio;
pub mod dataio;
pub mod cli;
pub mod evaluation;
pub mod geometry;
pub mod mapping;
pub mod odometry;
pub mod relocalization;
pub mod tensor;

pub use binio::DEFAULT_MAX_BYTES;
