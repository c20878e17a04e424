//! Condition adapter and injection plans, the instruction-embedding stub, and
//! in-context exemplar fusion.

pub mod adapter;
pub mod icl;
pub mod instruction;
pub mod plan;
pub mod prompt;

pub use adapter::{encode_condition, init_adapter};
pub use icl::{fuse_icl_concat, fuse_icl_projection_addition, init_projectors, FusionMode, IclProjectors};
pub use instruction::{encode_instruction, Vocab, UNK};
pub use plan::{Condition, InjectionPlan, InjectionVariant};
pub use prompt::{PromptFormat, PromptPack};
