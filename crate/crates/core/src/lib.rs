pub mod cgib;
pub mod context;
pub mod cprl;
pub mod data;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod meta;
pub mod nn;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
