pub mod dataset;
pub mod ebu;
pub mod eem;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod orchestrator;
pub mod pae;
pub mod par;
pub mod queue;
pub mod selection;
pub mod types;

pub use error::{Error, Result};
