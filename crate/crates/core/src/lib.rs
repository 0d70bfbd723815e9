//! Age-upon-Decisions analysis for single-server update-and-decide systems.
//!
//! The crate covers closed-form mean-AuD and missing-probability formulas
//! ([`queue`]), the arrival-distribution families they are parametrized by
//! ([`dist`]), optimizers for the arrival law and the decision offset
//! ([`optimize`]), a Monte Carlo simulator used to validate all of the above
//! ([`sim`]), and sweep tables with CSV/JSON output ([`report`]).

pub mod dist;
pub mod error;
pub mod optimize;
pub mod quad;
pub mod queue;
pub mod report;
pub mod sim;
mod special;

pub use error::{AudError, Result};
