//! Dense tensors, the gradient tape, and the SGD optimizer.

mod dense;
mod optim;
mod tape;

pub use dense::Tensor;
pub use optim::{sgd_step, ParamId, ParamStore, SgdConfig};
pub use tape::{FrozenWeight, Precision, Tape, Var};
