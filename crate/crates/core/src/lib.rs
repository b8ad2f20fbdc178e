pub mod data;
pub mod dct;
pub mod diff;
pub mod error;
pub mod generator;
pub mod kinematics;
pub mod metrics;
pub mod prior;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
