//! Calibrated junction hypertrees for interactive aggregate queries over
//! acyclic joins.

pub mod augment;
pub mod engine;
pub mod error;
pub mod jointree;
pub mod manager;
pub mod olap;
pub mod planner;
pub mod predicate;
pub mod relation;
pub mod semiring;
pub mod sqlgen;
pub mod synth;
pub mod value;

pub use error::{Error, Result};
