//! Mixture of visual projectors for continual learning of vision-language
//! tasks, on a synthetic world small enough to test end to end.

pub mod error;
pub mod numerics;
pub mod objectives;
pub mod pruning;
pub mod relevance;
pub mod moe;
pub mod synth;
pub mod harness;

pub use error::{MvpError, Result};
