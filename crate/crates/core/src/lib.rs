//! Continuous-time targeted minimum loss-based estimation for longitudinal
//! event-stream data.

pub mod baselines;
pub mod error;
pub mod events;
pub mod gcomp;
pub mod hal;
pub mod infer;
pub mod nuisance;
pub mod pipeline;
pub mod simulate;
pub mod target;
pub mod verify;

pub use error::{Error, Result};
