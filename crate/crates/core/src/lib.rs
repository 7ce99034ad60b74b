pub mod config;
pub mod error;
pub mod grad;
pub mod harness;
pub mod interp;
pub mod io;
pub mod losses;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
