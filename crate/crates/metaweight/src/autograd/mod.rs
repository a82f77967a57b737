//! Reverse-mode automatic differentiation with opt-in higher-order support,
//! plus the optimizers and checkpoint container built on top of it.

pub mod checkpoint;
pub mod nnops;
pub mod optim;
mod tape;
mod tensor;

pub use tape::Tape;
pub use tensor::Tensor;
