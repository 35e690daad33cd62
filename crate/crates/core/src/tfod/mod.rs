//! Task-focused few-shot detection: failures, annotation, updates and trials.

mod annotate;
mod store;
mod trial;
mod types;

pub use annotate::*;
pub use store::*;
pub use trial::*;
pub use types::*;
