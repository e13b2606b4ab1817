//! Small f64 tensor runtime: tape autodiff, attention, initializers, and a
//! finite-difference gradient checker. Everything is single threaded and
//! deterministic; values depend only on inputs and seeds, never on timing
//! or iteration order.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod tensor;

pub use attention::{multi_head_attention, AttnBlock, MhaParams, LN_EPS, MASK_OFF};
pub use gradcheck::{finite_diff_check, rel_err, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use tensor::{AttentionConfig, ParamId, ParamSet, Tensor};
