pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod attention;
pub mod selector;
pub mod tosa_layer;
pub mod config;
pub mod model;
pub mod training;
pub mod costmodel;
pub mod mask;
