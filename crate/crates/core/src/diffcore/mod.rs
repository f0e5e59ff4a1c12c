//! Reverse-mode differentiation, MLPs, positional encoding, Adam, gradient
//! checking and checkpoint files. Everything runs in `f64`.

mod adam;
mod checkpoint;
mod encoding;
pub mod gradcheck;
mod mlp;
mod tape;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use encoding::{encoded_width, pos_encode, pos_encode_into, pos_encode_vjp};
pub use gradcheck::{check_store, finite_diff_check};
pub use mlp::{Mlp, MlpSpec, MlpTrace};
pub use tape::{matmul, sigmoid, softplus, Activation, CustomOp, Gradients, SparseRows, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
