//! Training objectives: hinge adversarial losses, the matching-aware
//! gradient penalty, the feature-space visual loss, and the combined
//! generator/discriminator objectives.
//!
//! Batch expectations are arithmetic means. Every loss returns a scalar
//! tensor that stays differentiable when its inputs are on a tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Weight of the visual loss in the generator objective.
    pub lambda1: f64,
    /// Weight of the gradient penalty in the discriminator objective.
    pub lambda2: f64,
    /// Gradient-penalty exponent.
    pub p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda1: 0.1, lambda2: 2.0, p: 6.0 }
    }
}

fn check_batch(op: &'static str, t: &Tensor) -> Result<usize> {
    if t.rank() != 1 || t.numel() == 0 {
        return Err(Error::invalid(format!(
            "{op}: expected non-empty logit vector, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.shape()[0])
}

/// Hinge discriminator loss: real logits are pushed above +1, fake and
/// mismatched logits below −1, the two negative terms at half weight.
pub fn d_adv_loss(d_real: &Tensor, d_fake: &Tensor, d_mismatch: &Tensor) -> Result<Tensor> {
    let n = check_batch("d_adv_loss", d_real)?;
    if check_batch("d_adv_loss", d_fake)? != n || check_batch("d_adv_loss", d_mismatch)? != n {
        return Err(Error::invalid("d_adv_loss: batch sizes differ"));
    }
    let real_term = d_real.neg()?.add_scalar(1.0)?.relu()?.mean_all()?;
    let fake_term = d_fake.add_scalar(1.0)?.relu()?.mean_all()?.mul_scalar(0.5)?;
    let mm_term = d_mismatch.add_scalar(1.0)?.relu()?.mean_all()?.mul_scalar(0.5)?;
    real_term.add(&fake_term)?.add(&mm_term)
}

/// Hinge generator loss: maximize the score of fakes, so minimize its
/// negation.
pub fn g_adv_loss(d_fake: &Tensor) -> Result<Tensor> {
    check_batch("g_adv_loss", d_fake)?;
    d_fake.mean_all()?.neg()
}

/// Gradient penalty from logits already on the tape: per-sample
/// (‖∇ₓD‖₂ + ‖∇ₛD‖₂)^p averaged over the batch. `x` and `s` must be
/// attached grad targets of `logits`. The result remains differentiable
/// with respect to everything the logits depend on.
pub fn gradient_penalty(tape: &Tape, logits: &Tensor, x: &Tensor, s: &Tensor, p: f64) -> Result<Tensor> {
    let root = logits.sum_all()?;
    let grads = tape.backward(&root, &[x, s], true)?;
    let gx_norm = grads[0].l2_norm_trailing(grads[0].rank() - 1)?;
    let gs_norm = grads[1].l2_norm_trailing(grads[1].rank() - 1)?;
    gx_norm.add(&gs_norm)?.pow_scalar(p)?.mean_all()
}

/// Matching-aware gradient penalty on real images and their matching
/// sentences. Runs the discriminator closure on watched copies of `x` and
/// `s`, differentiates the scores with a recorded backward pass, and
/// penalizes the gradient norms.
pub fn magp_loss<F>(tape: &Tape, x: &Tensor, s: &Tensor, discriminator: F, p: f64) -> Result<Tensor>
where
    F: FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
{
    let xw = tape.watch(&x.detach().requires_grad(true));
    let sw = tape.watch(&s.detach().requires_grad(true));
    let logits = discriminator(&xw, &sw)?;
    gradient_penalty(tape, &logits, &xw, &sw, p)
}

/// L1 visual loss: mean absolute difference between discriminator features
/// of real and generated images, over all elements and the batch.
pub fn visual_loss(f_real: &Tensor, f_fake: &Tensor) -> Result<Tensor> {
    if f_real.shape() != f_fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "visual_loss",
            detail: format!("{:?} vs {:?}", f_real.shape(), f_fake.shape()),
        });
    }
    f_real.sub(f_fake)?.abs()?.mean_all()
}

/// L_G = L_adv_G + λ₁·L_vis
pub fn g_objective(adv: &Tensor, vis: &Tensor, lambda1: f64) -> Result<Tensor> {
    if lambda1 == 0.0 {
        return Ok(adv.clone());
    }
    adv.add(&vis.mul_scalar(lambda1)?)
}

/// L_D = L_adv_D + λ₂·L_M
pub fn d_objective(adv: &Tensor, magp: &Tensor, lambda2: f64) -> Result<Tensor> {
    if lambda2 == 0.0 {
        return Ok(adv.clone());
    }
    adv.add(&magp.mul_scalar(lambda2)?)
}
