pub mod analyzer;
pub mod compressor;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
