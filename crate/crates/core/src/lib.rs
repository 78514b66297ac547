//! Two-branch convolutional classifier for grayscale micrographs.
//!
//! The pipeline feeds every image through two front ends — a local
//! standard-deviation filter and a 2D discrete cosine transform — runs each
//! through its own convolutional feature extractor, concatenates the flattened
//! features, and classifies with a dense network. Training, evaluation, the
//! full metric suite, and a synthetic texture dataset for end-to-end checks
//! all live here; the `temviro` binary is a thin front end over this crate.

pub mod featuremap;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod threads;
pub mod trainer;

pub use featuremap::FeatureMap;
