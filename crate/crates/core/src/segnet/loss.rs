use alloc::vec;
use alloc::vec::Vec;

use super::ops::softmax_backward;
use super::weights::ClassWeights;
use super::NetError;
use crate::metrics::ProbMap;

/// How per-pixel terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Mean over supported pixels of the whole batch.
    #[default]
    Mean,
    Sum,
}

/// Soft-label target for a batch, laid out like the prediction.
#[derive(Debug, Clone, Copy)]
pub struct LossTarget<'a> {
    /// Target distribution planes, `batch x classes x height x width`.
    pub probs: &'a [f64],
    /// Per-pixel weight, `batch x height x width`.
    pub pixel_weight: &'a [f64],
    /// Pixels without any annotation are excluded.
    pub supported: &'a [bool],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the pre-softmax logits.
    pub grad_logits: Vec<f64>,
    pub supported_pixels: usize,
}

const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Weighted KL divergence `KL(target || prediction)`.
///
/// Per pixel: `pixel_weight * sum_c w_c * t_c * ln(t_c / (p_c + epsilon))`,
/// with `0 * ln(0 / .) = 0`.
pub fn kl_loss(
    pred: &ProbMap,
    target: LossTarget<'_>,
    weights: &ClassWeights,
    epsilon: f64,
    reduction: Reduction,
) -> Result<LossOutput, NetError> {
    if !(epsilon > 0.0) {
        return Err(NetError::NonPositiveEpsilon);
    }
    let c = pred.n_classes();
    let shape = pred.shape();
    let hw = shape.slice_len();
    let n_pix = shape.len();
    if target.probs.len() != n_pix * c
        || target.pixel_weight.len() != n_pix
        || target.supported.len() != n_pix
        || weights.len() != c
    {
        return Err(NetError::LossShape);
    }
    let p = pred.data();
    let t = target.probs;
    let supported_pixels = target.supported.iter().filter(|&&s| s).count();
    let scale = match reduction {
        Reduction::Mean if supported_pixels > 0 => 1.0 / supported_pixels as f64,
        Reduction::Mean => 0.0,
        Reduction::Sum => 1.0,
    };
    let mut loss = 0.0;
    let mut grad_logits = vec![0.0; p.len()];
    let mut grad_p = vec![0.0; c * hw];
    for z in 0..shape.depth {
        let base = z * c * hw;
        grad_p.iter_mut().for_each(|g| *g = 0.0);
        for px in 0..hw {
            let v = z * hw + px;
            if !target.supported[v] {
                continue;
            }
            let (mut sp, mut st) = (0.0, 0.0);
            for k in 0..c {
                sp += p[base + k * hw + px];
                st += t[base + k * hw + px];
            }
            if (sp - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(NetError::NotNormalized {
                    what: "prediction",
                    pixel: v,
                    sum: sp,
                });
            }
            if (st - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(NetError::NotNormalized {
                    what: "target",
                    pixel: v,
                    sum: st,
                });
            }
            let pw = target.pixel_weight[v];
            let mut term = 0.0;
            for k in 0..c {
                let i = base + k * hw + px;
                let tk = t[i];
                if tk == 0.0 {
                    continue;
                }
                let wk = weights.get(k);
                let q = p[i] + epsilon;
                term += wk * tk * libm::log(tk / q);
                grad_p[k * hw + px] = -scale * pw * wk * tk / q;
            }
            loss += pw * term;
        }
        softmax_backward(
            c,
            hw,
            &p[base..base + c * hw],
            &grad_p,
            &mut grad_logits[base..base + c * hw],
        );
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad_logits,
        supported_pixels,
    })
}
