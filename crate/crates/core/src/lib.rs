//! Martingale posterior estimation for discretely observed diffusions.

pub mod autodiff;
pub mod bridge;
pub mod error;
pub mod harness;
pub mod models;
pub mod mpd;
pub mod rng;
pub mod sampler;
pub mod sde;

pub use error::{MpdError, Result};
