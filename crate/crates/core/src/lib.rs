pub mod backbone;
pub mod config;
pub mod context;
pub mod datapipe;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod train;

pub use error::{Error, Result};
