//! File formats, flow caches and the experiment pipeline around
//! [`rrrn_core`].

pub use rrrn_core as core;

pub mod assets;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod frames;
pub mod generate;
pub mod landmarks;
pub mod manifest_io;
pub mod occlude;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use pipeline::{Occlusion, Pipeline};
