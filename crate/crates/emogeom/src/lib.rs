pub mod capture;
pub mod cli;
pub mod error;
pub mod lm;
pub mod pipeline;
pub mod registry;
pub mod report;
pub mod stimuli;

pub use error::{Error, Result};
