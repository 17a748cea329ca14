pub mod anatomical;
pub mod cli;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod hspl;
pub mod nn;
pub mod synthetic;
pub mod volume_io;

pub use error::{Error, Result};
