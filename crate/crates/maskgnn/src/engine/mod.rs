//! Minimal dense differentiable compute core: tensors, a reverse-mode tape,
//! and the Adam update. 64-bit floats throughout.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use tape::{ParamId, ParamStore, Tape, VarId};
pub use tensor::{SparseMatrix, Tensor};
