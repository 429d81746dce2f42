//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Shapes must match exactly; the only implicit expansion is along the
//! channel axis for per-channel parameters (bias, batch-norm operands).

mod conv;
mod dense;
mod ops;
mod scalar;
mod tape;

pub use conv::{Conv2dCfg, Padding};
pub use dense::{numel, Tensor};
pub use scalar::{matmul, Scalar};
pub use tape::{Gradients, Tape, Var};

use crate::error::{shape_err, Result};

/// Normalization statistics source for [`batch_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch's statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Running buffers and hyper-parameters of one batch-norm layer.
pub struct BnRunning<'a, F: Scalar> {
    pub mean: &'a mut Tensor<F>,
    pub var: &'a mut Tensor<F>,
    pub momentum: F,
    /// Only pretraining updates the buffers; synthetic-data passes never do.
    pub update: bool,
}

/// Batch normalization. In train mode also returns the batch `(mean, var)`
/// as differentiable values and, when requested, folds them into the
/// running buffers with `running ← (1 − momentum)·running + momentum·batch`
/// (the variance update uses the unbiased estimate).
pub fn batch_norm<'t, F: Scalar>(
    input: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    running: BnRunning<'_, F>,
    mode: BnMode,
    eps: F,
) -> Result<(Var<'t, F>, Option<(Var<'t, F>, Var<'t, F>)>)> {
    let shape = input.shape();
    let channels = *shape
        .get(1)
        .ok_or_else(|| shape_err!("batch_norm needs N×C…, got {shape:?}"))?;
    if running.mean.shape() != [channels] || running.var.shape() != [channels] {
        return Err(shape_err!(
            "running statistics do not match {channels} channels"
        ));
    }
    let tape = input.tape;
    match mode {
        BnMode::Eval => {
            let mean = tape.constant(running.mean);
            let var = tape.constant(running.var);
            Ok((input.bn_apply(mean, var, gamma, beta, eps)?, None))
        }
        BnMode::Train => {
            let mean = input.channel_mean()?;
            let var = input.channel_var(mean)?;
            if running.update {
                let count = input.numel() / channels;
                let unbias = if count > 1 {
                    F::of(count as f64 / (count as f64 - 1.0))
                } else {
                    F::one()
                };
                let one = F::one();
                let m = running.momentum;
                for (r, b) in running.mean.data_mut().iter_mut().zip(mean.to_vec()) {
                    *r = (one - m) * *r + m * b;
                }
                for (r, b) in running.var.data_mut().iter_mut().zip(var.to_vec()) {
                    *r = (one - m) * *r + m * b * unbias;
                }
            }
            let y = input.bn_apply(mean, var, gamma, beta, eps)?;
            Ok((y, Some((mean, var))))
        }
    }
}
