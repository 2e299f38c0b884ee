//! Dense arrays and a reverse-mode differentiation tape.

mod array;
mod tape;

pub use array::{ArrayError, DenseArray};
pub use tape::{GradMap, NodeId, Tape, TapeError};
