//! Config-driven orchestration of the offline learning and closed-loop
//! evaluation stages, with content-hashed artifacts.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::PipelineConfig;
pub use error::PipelineError;
pub use stages::Pipeline;
