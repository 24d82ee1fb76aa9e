//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Just enough machinery to express the encoder: rank 0..=3 row-major
//! tensors, a tape-style computation graph over them, and a central
//! finite-difference gradient oracle for verifying every backward rule.
//! All arithmetic is 64-bit; stochastic ops take an explicit seeded RNG.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Mode, NodeId};
pub use tensor::{mean_var, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a rank-{expected} tensor, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("series too short for pooling stage")]
    SeriesTooShortForPooling,
    #[error("conv1d window does not fit: time extent {t} with padding {padding} < kernel {kernel}")]
    WindowTooShort {
        t: usize,
        padding: usize,
        kernel: usize,
    },
    #[error("dropout probability {0} outside [0, 1)")]
    BadDropoutProbability(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelCountMismatch { labels: usize, batch: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("channel slice {from}..{to} out of bounds for {channels} channels")]
    BadChannelSlice {
        from: usize,
        to: usize,
        channels: usize,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
}
