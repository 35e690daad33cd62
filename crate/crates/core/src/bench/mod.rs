//! Scenario configs, seeded protocol runners and report emission.

pub mod catalog;
mod protocols;
mod report;
mod scenario;

pub use protocols::*;
pub use report::*;
pub use scenario::*;
