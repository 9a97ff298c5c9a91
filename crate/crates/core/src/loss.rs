//! Dice + focal hybrid segmentation loss.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub dice_smooth: f64,
    pub prob_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha: 0.25,
            dice_smooth: 1e-6,
            prob_clip: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(
                "gamma",
                format!("{} must be ≥ 0", self.gamma),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(
                "alpha",
                format!("{} outside (0, 1)", self.alpha),
            ));
        }
        if !(self.dice_smooth > 0.0) || !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err(Error::invalid("dice_smooth/prob_clip", "must be positive"));
        }
        Ok(())
    }
}

/// Records `dice + focal` on the graph and returns the loss node.
pub fn hybrid_loss_graph(
    g: &mut Graph,
    target: &Tensor,
    pred: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let dice = g.dice_loss(target, pred, cfg.dice_smooth)?;
    let focal = g.focal_loss(target, pred, cfg.gamma, cfg.alpha, cfg.prob_clip)?;
    g.add(dice, focal)
}

fn eval(pred: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<f32> {
    let mut g = Graph::new();
    let q = g.constant(pred.clone());
    let loss = f(&mut g, q)?;
    Ok(g.value(loss).item())
}

/// Per-image `1 - (2Σpq + s) / (Σp + Σq + s)`, averaged over the batch.
/// The leading axis is the batch axis.
pub fn dice_loss(target: &Tensor, pred: &Tensor, smooth: f64) -> Result<f32> {
    eval(pred, |g, q| g.dice_loss(target, q, smooth))
}

/// Pixel mean of `-α(1-q)^γ p log q - (1-α) q^γ (1-p) log(1-q)` with
/// `q` clipped to `[clip, 1 - clip]`.
pub fn focal_loss(
    target: &Tensor,
    pred: &Tensor,
    gamma: f64,
    alpha: f64,
    clip: f64,
) -> Result<f32> {
    eval(pred, |g, q| g.focal_loss(target, q, gamma, alpha, clip))
}

pub fn hybrid_loss(target: &Tensor, pred: &Tensor, cfg: &LossConfig) -> Result<f32> {
    eval(pred, |g, q| hybrid_loss_graph(g, target, q, cfg))
}
