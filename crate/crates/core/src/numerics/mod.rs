//! Dense linear algebra, a reverse-mode tape, Adam, and a finite-difference
//! gradient oracle.

mod adam;
mod attention;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use attention::{attention_block, attention_block_var, init_attention_params, AttentionVars};
pub use gradcheck::{central_difference, finite_diff_check, relative_error, FdReport};
pub use params::{gradient, ParamSet, ParamVars};
pub use tape::{Gradients, Graph, Var};
pub use tensor::{affine, cosine, cross_entropy, sigmoid, softmax, Target, Tensor2};

pub(crate) use tensor::dot;
