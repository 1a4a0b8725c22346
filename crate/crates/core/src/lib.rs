pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod models;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
