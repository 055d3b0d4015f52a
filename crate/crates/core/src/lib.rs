//! profitlab: a desk-scale laboratory for token-selective supervised
//! fine-tuning. Everything runs on the CPU in f64 with fixed seeds, so runs
//! are exactly reproducible and every gradient can be checked against finite
//! differences.

pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod stats;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
