//! Interactive click-based multi-object segmentation of 3D point clouds.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod sampling;
pub mod service;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
