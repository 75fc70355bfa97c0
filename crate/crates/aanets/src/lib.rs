//! Desk-scale class-incremental learning with dual-branch residual
//! aggregation networks.
//!
//! The crate trains a small convolutional backbone over a sequence of
//! phases, each introducing new classes. After the initial phase the trunk
//! freezes; later phases learn per-level stable/plastic branch pairs whose
//! outputs are mixed by aggregation weights, themselves tuned on a balanced
//! exemplar set in an alternating two-loop schedule.

pub mod backbone;
mod binio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod memory;
pub mod protocol;
pub mod trainer;

pub use error::{Error, Result};
