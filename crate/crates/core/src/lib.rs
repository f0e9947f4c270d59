//! Multi-view depth estimation, TSDF fusion and evaluation on synthetic scenes.

pub mod error;
pub mod evaluation;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod keyframing;
pub mod losses;
pub mod maps;
mod mc_tables;
pub mod synth;
pub mod tinynet;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
