pub mod analysis;
pub mod constants;
pub mod engine;
pub mod error;
pub mod hamiltonian;
pub mod harness;
pub mod linalg;
pub mod sequence;
pub mod spinsys;

pub use error::{Error, Result};
