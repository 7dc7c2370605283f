pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod domain;
pub mod env;
pub mod error;
pub mod eval;
pub mod graph;
pub mod index;
pub mod learn;
pub mod linalg;
pub mod model;
pub mod params;
pub mod pipeline;

pub use error::{Error, Result};
