mod binio;
pub mod error;
pub mod harness;
pub mod losses;
pub mod md;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod sd;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
