pub mod cbs_meter;
pub mod config;
pub mod engine;
pub mod error;
pub mod rng;
pub mod runstore;
pub mod scaling_laws;
pub mod noise_scale;
pub mod optim;
pub mod pipeline;
pub mod tasks;
pub mod warmup;

pub use error::{Error, Result};
