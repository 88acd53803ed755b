pub mod error;
pub mod estimator;
pub mod geom;
pub mod datasets;
pub mod imu;
pub mod metrics;
pub mod pipeline;
pub mod rangeflow;
pub mod sim;

pub use error::{Error, Result};
