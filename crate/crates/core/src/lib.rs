pub mod analysis;
pub mod cli;
pub mod effect;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod q_statistics;
pub mod sim;
pub mod study_data;
pub mod tau_interval;
pub mod tau_point;

pub use error::{MetaError, Result};
