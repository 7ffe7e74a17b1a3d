//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

pub mod kernels;
mod tape;

pub use tape::{Tape, Var};
