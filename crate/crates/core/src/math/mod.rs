//! Numeric kernel: dense linear algebra, seeded RNG streams, statistics,
//! layer primitives with manual backprop, Adam, and a finite-difference
//! gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod rng;
pub mod stats;

pub use adam::{AdamHyper, AdamState};
pub use layers::{Affine, AffineGrads};
pub use linalg::{Matrix, Vector};
pub use rng::SeedStream;
pub use stats::StatsError;

use std::fmt;

/// Errors from the numeric kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MathError {
    /// Operand dimensions do not line up.
    DimMismatch { expected: usize, got: usize },
    /// Parameter/gradient buffers of different lengths.
    ShapeMismatch { left: usize, right: usize },
    /// Class label outside the number of logits.
    BadLabel { label: usize, classes: usize },
}

impl fmt::Display for MathError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MathError::DimMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            MathError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left} vs {right}")
            }
            MathError::BadLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
        }
    }
}

impl std::error::Error for MathError {}
