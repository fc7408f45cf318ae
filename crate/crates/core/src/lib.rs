pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod kg_store;
pub mod kgbert;
pub mod linker;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
