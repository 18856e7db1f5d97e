//! Task likelihood losses and the total variational objective.
//!
//! The total loss is (N/M)·(nll1 + nll2) + λ1·Σ‖M‖² − λ2·Σ H(p), where the
//! L2 and entropy sums run over the SFG kernel banks only (heads and merge
//! parameters carry no weight penalty).

use crate::sfg::SfgLayer;
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_LAMBDA1: f64 = 1e-6;
pub const DEFAULT_LAMBDA2: f64 = 1e-5;

/// The assembled loss with its logged components.
pub struct LossTerms {
    pub nll_task1: Tensor,
    pub nll_task2: Tensor,
    pub weight_l2: Tensor,
    pub entropy_sum: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> LossValues {
        LossValues {
            nll_task1: self.nll_task1.item(),
            nll_task2: self.nll_task2.item(),
            weight_l2: self.weight_l2.item(),
            entropy_sum: self.entropy_sum.item(),
            total: self.total.item(),
        }
    }
}

/// Plain-number view of `LossTerms` for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossValues {
    pub nll_task1: f64,
    pub nll_task2: f64,
    pub weight_l2: f64,
    pub entropy_sum: f64,
    pub total: f64,
}

/// RMSE over the batch; the regression negative log-likelihood surrogate.
pub fn nll_regression(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "nll_regression",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if pred.numel() == 0 {
        return Err(TensorError::Invalid("nll_regression on an empty batch".into()));
    }
    let diff = pred.sub(target)?;
    diff.mul(&diff)?.mean()?.sqrt()
}

/// Mean cross-entropy with log-softmax; labels index the channel axis.
pub fn nll_classification(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    logits.log_softmax()?.nll_from_log_probs(labels)
}

/// Soft-Dice (per class, averaged, smoothing 1e-5) plus mean cross-entropy
/// for dense segmentation. `labels` is the row-major [B,H,W] label map.
pub fn dice_ce(pred_logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    const SMOOTH: f64 = 1e-5;
    let [b, c, h, w] = pred_logits.rank4("dice_ce")?;
    if labels.len() != b * h * w {
        return Err(TensorError::Invalid(format!(
            "dice_ce: {} labels for {} pixels",
            labels.len(),
            b * h * w
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::Invalid(format!(
            "dice_ce: label {bad} out of range for {c} classes"
        )));
    }
    // one-hot target as a constant
    let mut onehot = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for s in 0..h * w {
            let l = labels[bi * h * w + s];
            onehot[(bi * c + l) * h * w + s] = 1.0;
        }
    }
    let target = Tensor::from_vec(onehot, &[b, c, h, w])?;
    let probs = pred_logits.softmax()?;
    let intersection = probs.mul(&target)?.sum_per_channel()?;
    let denom = probs.sum_per_channel()?.add(&target.sum_per_channel()?)?;
    let dice = intersection
        .mul_scalar(2.0)?
        .add_scalar(SMOOTH)?
        .div(&denom.add_scalar(SMOOTH)?)?;
    let dice_loss = dice.mean()?.neg()?.add_scalar(1.0)?;
    let ce = pred_logits.log_softmax()?.nll_from_log_probs(labels)?;
    dice_loss.add(&ce)
}

/// The KL surrogate pieces over the SFG layers.
pub struct KlTerms {
    pub weight_l2: Tensor,
    pub entropy_sum: Tensor,
    /// λ1·weight_l2 − λ2·entropy_sum
    pub combined: Tensor,
}

/// Σ‖M‖² and Σ H(p) over all SFG kernel banks, combined with λ1, λ2.
/// The prior length-scale constant is absorbed into λ1.
pub fn kl_surrogate(layers: &[&SfgLayer], lambda1: f64, lambda2: f64) -> Result<KlTerms> {
    let mut weight_l2 = Tensor::scalar(0.0);
    let mut entropy_sum = Tensor::scalar(0.0);
    for layer in layers {
        let sq = layer.kernels.mul(&layer.kernels)?.sum()?;
        weight_l2 = weight_l2.add(&sq)?;
        entropy_sum = entropy_sum.add(&layer.grouping.entropy()?.sum()?)?;
    }
    let combined = weight_l2
        .mul_scalar(lambda1)?
        .sub(&entropy_sum.mul_scalar(lambda2)?)?;
    Ok(KlTerms {
        weight_l2,
        entropy_sum,
        combined,
    })
}

/// (N/M)·(nll1 + nll2) + kl.combined
pub fn total_loss(
    nll1: &Tensor,
    nll2: &Tensor,
    kl: &KlTerms,
    dataset_size: usize,
    batch_size: usize,
) -> Result<Tensor> {
    if batch_size == 0 || dataset_size < batch_size {
        return Err(TensorError::Invalid(format!(
            "total_loss: need dataset size >= batch size >= 1, got N={dataset_size} M={batch_size}"
        )));
    }
    let scale = dataset_size as f64 / batch_size as f64;
    nll1.add(nll2)?.mul_scalar(scale)?.add(&kl.combined)
}

/// Convenience bundling the full objective assembly.
pub fn assemble(
    nll1: Tensor,
    nll2: Tensor,
    layers: &[&SfgLayer],
    lambda1: f64,
    lambda2: f64,
    dataset_size: usize,
    batch_size: usize,
) -> Result<LossTerms> {
    let kl = kl_surrogate(layers, lambda1, lambda2)?;
    let total = total_loss(&nll1, &nll2, &kl, dataset_size, batch_size)?;
    Ok(LossTerms {
        nll_task1: nll1,
        nll_task2: nll2,
        weight_l2: kl.weight_l2,
        entropy_sum: kl.entropy_sum,
        total,
    })
}
