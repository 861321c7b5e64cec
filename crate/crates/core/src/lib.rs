pub mod autodiff;
pub mod dataio;
pub mod divop;
pub mod error;
pub mod fem;
pub mod graph;
pub mod mesh;
pub mod meshgen;
pub mod model;
pub mod pipeline;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
