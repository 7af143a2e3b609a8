//! Training and probing toolkit for a two-stream multimodal encoder.
//!
//! The library builds a shared "hub" representation from a visual and a
//! language embedding, trains small retrieval or classification heads on top
//! of it under several freezing regimes, and measures what the resulting
//! spaces look like (representational similarity, nearest-neighbour overlap,
//! density, covariate correlations).
//!
//! Everything is CPU-only, `f64` end to end, and deterministic: every source
//! of randomness flows from a named substream of a single run seed.

pub mod analysis;
pub mod data;
pub mod encoder;
pub mod heads;
pub mod math;
pub mod probing;
pub mod training;
