//! Weakly supervised phone embeddings from word-level same/different
//! information, for audio, visual and audio-visual speech features.

pub mod abx;
pub mod archive;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod features;
pub mod network;
pub mod pairing;
pub mod pipeline;
pub mod prep;
pub mod report;
pub mod rng;
pub mod structure;
pub mod synth;
pub mod wsmf;

pub use error::{Error, Result};
