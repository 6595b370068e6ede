//! Multi-channel symbolic music composition.
//!
//! Scores with melody, chords and bass channels are encoded as zig-zag
//! event streams, modeled by a stacked LSTM, and sampled back under grammar
//! and key constraints to build complete songs from section templates.

pub mod assembler;
pub mod dataset;
pub mod encoder;
pub mod midi;
pub mod neural;
pub mod pipeline;
pub mod sampler;
pub mod score;
pub mod workspace;
