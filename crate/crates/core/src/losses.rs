//! Per-task cross-entropy losses and the weighted multi-task objective.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Weights of the two task losses plus the squared-L2 penalty on parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiTaskLossConfig {
    /// Weight of the nodule / non-nodule classification loss.
    pub weight_cls: f64,
    /// Weight of the voxel-wise segmentation loss.
    pub weight_seg: f64,
    pub lambda: f64,
    /// Probabilities are clamped to `[clamp_eps, 1 - clamp_eps]` before `ln`.
    pub clamp_eps: f64,
}

impl Default for MultiTaskLossConfig {
    fn default() -> Self {
        MultiTaskLossConfig {
            weight_cls: 1.0,
            weight_seg: 1.0,
            lambda: 0.0,
            clamp_eps: 1e-7,
        }
    }
}

impl MultiTaskLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weight_cls < 0.0 || self.weight_seg < 0.0 {
            return Err(config_err!("task weights must be nonnegative"));
        }
        if self.weight_cls == 0.0 && self.weight_seg == 0.0 {
            return Err(config_err!("at least one task weight must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(config_err!(
                "lambda must be nonnegative, got {}",
                self.lambda
            ));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(config_err!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            ));
        }
        Ok(())
    }
}

/// Negative log-likelihood of the labelled class, averaged over the batch.
/// `pred` holds `[batch, 2]` probabilities.
pub fn cross_entropy_class(
    g: &mut Graph,
    pred: Var,
    labels: &[usize],
    clamp_eps: f64,
) -> Result<Var> {
    g.cross_entropy_class(pred, labels, clamp_eps)
}

/// Binary cross-entropy averaged over voxels. Samples whose weight is zero
/// contribute nothing (used for candidates without a mask).
pub fn cross_entropy_voxel(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    sample_weights: Option<&[f64]>,
    clamp_eps: f64,
) -> Result<Var> {
    g.cross_entropy_voxel(pred, target, sample_weights, clamp_eps)
}

/// `w_cls * class_loss + w_seg * seg_loss + lambda * sum ||w||^2`.
pub fn multi_task_loss(
    g: &mut Graph,
    class_loss: Var,
    seg_loss: Var,
    params: &[Var],
    cfg: &MultiTaskLossConfig,
) -> Result<Var> {
    let c = g.scale(class_loss, cfg.weight_cls);
    let s = g.scale(seg_loss, cfg.weight_seg);
    let mut total = g.add(c, s)?;
    if cfg.lambda > 0.0 {
        for &p in params {
            let sq = g.sum_squares(p);
            let r = g.scale(sq, cfg.lambda);
            total = g.add(total, r)?;
        }
    }
    Ok(total)
}
