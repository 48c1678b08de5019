//! Disposable transfer learning at desk scale.
//!
//! A small MLP is pre-trained on a source task and fine-tuned on a target
//! task; a knowledge-disposal stage then unlearns the source task with the
//! gradient-collision loss (or a fooling-loss baseline) while distillation
//! keeps target predictions intact. Residual source knowledge is measured by
//! piggyback-learning accuracy: how well the released model can be
//! re-adapted to a piggyback task.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gc_engine;
pub mod losses;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod run;

pub use autodiff::{grad, hvp, GradientMap, Tensor};
pub use error::{DtlError, Result};
