pub mod autodiff;
pub mod decode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod policy;
pub mod rl;
pub mod tasks;

pub use error::{Error, Result};
