//! Desk-scale unified low-level vision: a conditional flow-matching diffusion
//! transformer with a condition adapter, instruction tokens and in-context
//! exemplar fusion, plus the degradation catalog and training harness.

pub mod conditioning;
pub mod config;
pub mod degrade;
pub mod dit;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{apply_plan, OmniLv};
pub use params::ParamStore;
pub use tensor::{Tape, Tensor, Var};

/// Tool version embedded in every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
