//! Progressive feature distillation with frequency-domain alignment,
//! exercised end to end on a synthetic multi-domain detection task.

pub mod distill;
pub mod error;
pub mod losses;
pub mod models;
pub mod plot;
pub mod similarity;
pub mod spectral;
pub mod synthdata;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
