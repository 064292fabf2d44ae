//! Minimal reverse-mode differentiation in `f64` for small survival networks:
//! dense layers, causal 1-D convolution, max pooling, Adam and Glorot init.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Activation, Gradients, SeqShape, Tape, Var};
pub use tensor::{glorot_init, glorot_limit, ParamId, ParamStore, ParamTensor};
