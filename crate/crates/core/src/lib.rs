//! Frozen tiny causal language model plus reusable low-rank capability
//! bases, a task-conditioned sparse composer, and the training and analysis
//! machinery around them, applied to a toy workflow-program domain.

pub mod analysis;
pub mod bases;
pub mod checkpoint;
pub mod composer;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod workflow;

pub use error::{Error, Result};

/// Version stamped on every file this crate writes.
pub const FORMAT_VERSION: u32 = 1;
