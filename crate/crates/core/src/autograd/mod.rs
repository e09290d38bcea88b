//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] walks it in
//! reverse. Besides elementwise arithmetic the tape knows the layers the
//! rest of the crate needs — dense and convolutional layers, their interval
//! images, batch-norm pieces and the worst-case cross-entropy — so interval
//! bounds themselves are differentiable.

mod gradcheck;
pub(crate) mod tape;

pub use gradcheck::{gradcheck, relative_error, GradcheckEntry, GradcheckOptions, GradcheckReport};
pub use tape::{record, Binary, GradientSet, Gradients, ParamId, Tape, Unary, Var};
