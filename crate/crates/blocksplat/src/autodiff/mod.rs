//! Reverse-mode automatic differentiation over dense f64 arrays, the Adam
//! optimizer, and a finite-difference gradient-check harness.

pub mod adam;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{backward, CustomBackward, Gradients, Op, Tape, ValueId};
pub use tensor::Tensor;
