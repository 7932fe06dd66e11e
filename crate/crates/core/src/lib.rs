pub mod augment;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
