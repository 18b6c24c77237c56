//! Clip-level near-duplicate video retrieval.
//!
//! Videos are cut into fixed 8-frame clips, each clip is encoded by a divided
//! space-time attention transformer into one unit-norm vector, and two
//! videos are compared with TopK Chamfer Similarity over their clip
//! vectors. The encoder is trained without labels: first by predicting
//! future frames from tube-masked past frames, then by similarity learning
//! with multi-similarity and flipped-clip losses.

mod binio;
pub mod check;
pub mod clip;
pub mod config;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod predmae;
pub mod retrieval;
pub mod rng;
pub mod similarity;
pub mod simlearn;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
