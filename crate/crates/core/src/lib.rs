pub mod checkpoint;
pub mod datasynth;
pub mod diffcore;
pub mod envlight;
pub mod error;
pub mod harmoneval;
pub mod image;
pub mod lightcond;
pub mod model;
pub mod nn;
pub mod stagesim;
pub mod trainer;

pub use error::{Error, Result};
