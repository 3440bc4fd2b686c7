pub mod ctc;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod search;
pub mod selfcond;
pub mod ssl;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
