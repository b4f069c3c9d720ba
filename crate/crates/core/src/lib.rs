pub mod autodiff;
pub mod error;
pub mod model;
pub mod search;
pub mod seed;
pub mod training;
pub mod workbench;

pub use error::{MptError, Result};
