//! Dense tensors, reverse-mode differentiation and parameter updates.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_difference_check, finite_difference_check_on, finite_difference_check_with, GradCheckReport, Stencil};
pub use optim::{clip_to_box, Optimizer, OptimizerKind, OptimizerSettings};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{log_softmax_masked, BatchStats, Tape, Var};
pub use tensor::Tensor;

/// Fail with the producing op named when any value is NaN or infinite.
pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> crate::Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite { op })
    }
}
