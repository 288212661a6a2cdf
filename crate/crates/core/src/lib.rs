pub mod costs;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod language;
pub mod map;
pub mod model;
pub mod nn;
pub mod scene;
pub mod sim;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
