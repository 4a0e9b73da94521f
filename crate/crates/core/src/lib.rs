pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod strategy;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
