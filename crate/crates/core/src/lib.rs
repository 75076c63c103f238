//! CPU differentiable Gaussian splatting with a progressive distractor-filtering
//! training pipeline.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod densify;
pub mod error;
pub mod eval;
pub mod filtering;
pub mod io;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod synthscene;
#[doc(hidden)]
pub mod testing;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
