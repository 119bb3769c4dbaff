pub mod baselines;
pub mod cli;
pub mod error;
pub mod evalmetrics;
pub mod matcore;
pub mod mla;
pub mod ranktheory;
pub mod ssnewton;
pub mod trifactor;

pub use error::{Error, Result};
