pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradsuite;
pub mod heads;
pub mod losses;
pub mod model;
pub mod params;
pub mod posenc;
pub mod solver;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod xencoder;

pub use error::{Error, Result};
