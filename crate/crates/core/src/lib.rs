//! Multi-sample variational training for sigmoid belief networks.

pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod estimators;
pub mod math;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod sbn;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
