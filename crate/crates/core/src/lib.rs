pub mod checkpoint;
pub mod conditioning;
pub mod dataset;
pub mod ddpm;
pub mod denoiser;
pub mod downstream;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod pipeline;
pub mod privacy;
pub mod schedule;
pub mod seed;
pub mod volume;

pub use error::{Error, Result};
