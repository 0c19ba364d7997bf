//! Execution-grounded idea search.
//!
//! Ideas are implemented as code diffs, scheduled and executed against a
//! research environment, and scored by the environment's reward mapping.
//! The resulting rewards drive an evolutionary search loop and a toy
//! policy-gradient loop over a tabular ideator.

pub mod analysis;
pub mod domain;
pub mod environments;
pub mod gateway;
pub mod implementer;
pub mod pipeline;
pub mod rlsim;
pub mod scheduler;
pub mod search;
pub mod seed;
pub mod worker;
