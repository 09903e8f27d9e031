//! Dense-tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! The operation set is exactly what the fusion model, decoder and losses
//! need: matrix products, row softmax, elementwise math, column concat,
//! reductions, and a handful of structured data-movement ops (row gather,
//! element gather, weighted row mixes) whose backward rules are scatter-adds.
//!
//! A [`Tape`] is single-threaded; independent tapes may live on separate
//! threads. Tensors are immutable after construction; gradients accumulate
//! on the tape and are read back per leaf.

mod param;
mod tape;
mod tensor;

pub use param::{Binder, Linear, Param};
pub use tape::{NodeId, RowMix, Tape};
pub use tensor::Tensor;
