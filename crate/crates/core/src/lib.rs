pub mod channels;
pub mod error;
pub mod evolve;
pub mod fock;
pub mod lift;
pub mod matrixkit;
pub mod qstate;
pub mod reconstruct;
pub mod tensors;

pub use error::{Error, Result};
