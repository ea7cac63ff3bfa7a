//! Dense numerics with hand-derived backward passes: the MLP backbone, the
//! additive attention used to fuse teacher features, and the normalized
//! multi-head classifier.

mod attention;
mod head;
mod mlp;
mod tensor;

pub use attention::{softmax as softmax_vec, AdditiveAttention, AttentionTape};
pub use head::NormalizedHead;
pub use mlp::{Layer, Mlp, MlpTape};
pub use tensor::{dot, norm, xavier_uniform, Matrix, ParamSet};
