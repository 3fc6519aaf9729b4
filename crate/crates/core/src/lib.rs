pub mod error;
pub mod numkernel;
pub mod subword;
pub mod encoder;
pub mod heads;
pub mod model;
pub mod training;
pub mod inference;
pub mod appcli;

pub use error::{Error, Result};
