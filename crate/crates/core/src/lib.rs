pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod pipeline;
pub mod textproc;
pub mod trainer;

pub use error::{Error, Result};
