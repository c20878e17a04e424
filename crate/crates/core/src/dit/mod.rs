//! Next-DiT style backbone: patch tokens, axial rotary attention with QK-norm,
//! sandwich-normalised blocks with timestep modulation, and the velocity head.

pub mod attention;
pub mod block;
pub mod config;
pub mod model;
pub mod patch;
pub mod rope;
pub mod timestep;

pub use attention::{attention, CrossInput};
pub use block::{sandwich_block, BlockInputs, BlockKind};
pub use config::ModelConfig;
pub use model::{dit_forward, dit_forward_traced, init_backbone, ForwardInputs, IclPrompt};
pub use patch::{grid_positions, patchify, patchify_raw, unpatchify, unpatchify_raw, TokenGrid};
pub use rope::{rope2d, Rope2d};
pub use timestep::timestep_embed;
