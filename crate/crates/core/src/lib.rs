pub mod decomp;
pub mod error;
pub mod fieldio;
pub mod forecaster;
pub mod grid;
pub mod metrics;
pub mod report;
pub mod rollout;
pub mod scaling;
pub mod synth;

pub use error::{Error, ErrorFamily, Result};
