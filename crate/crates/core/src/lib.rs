//! Discovery and analysis of one-relay overlay paths that beat the direct
//! Internet path between eyeball networks.

pub mod analytics;
pub mod campaign;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod formats;
pub mod geo;
pub mod registry;
pub mod report;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
