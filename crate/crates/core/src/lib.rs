//! Drifting field policies.
//!
//! A one-step generative policy trained by kernel mean-shift drift towards
//! high-value actions, together with toy environments, the training loop and
//! closed-form diagnostics for the drift operators.

pub mod agent;
pub mod approximator;
pub mod codec;
pub mod drift_field;
pub mod envs;
pub mod error;
pub mod losses;
pub mod oracle;

pub use error::{Error, Result};

/// Random generator used throughout; seedable and serialisable by position.
pub type DfpRng = rand_chacha::ChaCha8Rng;
