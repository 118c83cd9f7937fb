pub mod camera;
pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod decoder;
pub mod encodings;
pub mod error;
pub mod eval;
pub mod field;
pub mod losses;
pub mod merge;
pub mod model;
pub mod nn;
pub mod real;
pub mod regressor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
