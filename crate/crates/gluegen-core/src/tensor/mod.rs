//! Minimal dual-precision tensor engine with tape-based reverse-mode
//! autodiff.
//!
//! The module deliberately stays small: dense rank-1..3 arrays, a handful of
//! primitives with hand-written adjoints, named parameter stores, and a
//! central-difference oracle for validating gradients. Default training
//! precision is `f32`; gradient checks run the same code instantiated at
//! `f64`.

mod array;
mod element;
mod gradcheck;
mod store;
mod tape;

pub use array::{Array, Shape};
pub use element::Element;
pub use gradcheck::{finite_diff_grad, DEFAULT_FD_STEP};
pub use store::{ParameterStore, Tensor};
pub use tape::{Gradients, Tape, ValueId};
