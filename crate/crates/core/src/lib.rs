pub mod corrupt;
pub mod data;
pub mod error;
pub mod knn;
pub mod metrics;
pub mod net;
pub mod robust;
pub mod seed;
pub mod strategies;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
