pub mod attribution;
pub mod error;
pub mod expansion;
pub mod forward;
pub mod generate;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod par;

pub use error::{Error, Result};
