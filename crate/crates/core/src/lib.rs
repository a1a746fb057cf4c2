pub mod agent;
pub mod docs;
pub mod env;
pub mod error;
pub mod flow;
pub mod suggest;
pub mod trainer;

pub use error::{Error, Result};
