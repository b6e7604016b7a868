//! Batch-based recurrent activity recognition for egocentric photo-streams.
//!
//! Day sequences of precomputed per-frame feature vectors are classified frame
//! by frame with one of three heads: a linear frame baseline, a sliding-window
//! LSTM, or a "piggyback" LSTM whose last outputs are carried into the next,
//! overlapping batch. The crate also contains the day-level dataset splitter
//! (first-fit decreasing bins + exhaustive combination search under a
//! Bhattacharyya objective) and the evaluation toolkit.

pub mod batching;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nnet;
pub mod splitter;
pub mod training;

pub use error::{Error, Result};
