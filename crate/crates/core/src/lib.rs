//! Region-guided image harmonization.

pub mod colorfit;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod inference;
pub mod io;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use imaging::{Image, Mask};
