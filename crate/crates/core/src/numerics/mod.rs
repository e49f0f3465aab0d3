//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! The design is deliberately small: a [`Tensor`] is a shape plus a row-major
//! buffer, and a [`Tape`] records one backward closure per operation so that
//! gradients fall out of a single reverse sweep. There is no broadcasting
//! beyond trailing-suffix alignment and shared weight matrices over leading
//! batch dimensions, and every op rejects NaN/Inf outputs instead of letting
//! them propagate.

pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, Adam, Param, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({why})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        why: &'static str,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: reduction over zero elements")]
    EmptyReduction { op: &'static str },
    #[error("{op}: index {index} out of bounds for size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}
