pub mod crossmap;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod nmt;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
