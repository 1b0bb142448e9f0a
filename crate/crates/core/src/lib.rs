pub mod autodiff;
pub mod data;
pub mod error;
pub mod ncde;
pub mod model;
pub mod pe;

pub use error::{Error, Result};
