//! Committee-based active learning for a small anchor-based object detector.

pub mod acquisition;
pub mod active_loop;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod report;

pub use error::{Error, Result};
