//! Autodiff substrate: tensors, the recording tape, forward-mode duals,
//! finite-difference checks and parameter checkpoints.

pub mod dual;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use dual::{Dual, Real};
pub use gradcheck::{finite_difference_at, finite_difference_gradient, relative_error};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{sigmoid, SparseJacobian, Tape, Var, GATHER_PAD};
pub use tensor::Tensor;
