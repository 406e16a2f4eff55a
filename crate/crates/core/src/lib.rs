pub mod assignment;
pub mod attention;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
