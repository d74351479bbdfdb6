//! Minimal dense-tensor engine with reverse-mode automatic differentiation
//! and an Adam optimizer. Every differentiable operation the tracking
//! pipeline needs is a tape op here; everything runs in `f64` so finite
//! difference checks are meaningful.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_corrupted, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Tape, ValueId};
pub use tensor::Tensor;
