mod error;

pub mod config;
pub mod data;
pub mod decode;
pub mod diffusion;
pub mod endpoint;
pub mod evaluation;
pub mod guidance;
pub mod model;
pub mod nn;
pub mod report;
pub mod training;

pub use error::{Error, ErrorClass, Result};
