//! Few-step diffusion sampling by edge-consistency guided score distillation,
//! studied on distributions whose scores and flow maps are known in closed form.

pub mod adversarial;
pub mod distill;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod schedule;

pub use error::{Error, Result};
