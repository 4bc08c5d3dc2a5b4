pub mod error;
pub mod geo;
pub mod losses;
pub mod mining;
pub mod retrieval;
pub mod store;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
