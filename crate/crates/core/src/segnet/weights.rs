use alloc::vec;
use alloc::vec::Vec;

use crate::fusion::SoftLabel;
use crate::taxonomy::{LabelKind, N_GROUPS, UNLABELLED};
use crate::volume::LabelMask;

/// Per-class loss weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ClassWeights(Vec<f64>);

/// Degenerate situations met while deriving weights from data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightWarning {
    /// The group never occurs; its weight defaults to 1.
    EmptyGroup(i8),
    /// The group covers every labelled pixel; its weight is 0.
    SoleGroup(i8),
}

impl ClassWeights {
    /// Accepts any non-negative finite weights.
    pub fn new(weights: Vec<f64>) -> Option<Self> {
        weights
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
            .then_some(ClassWeights(weights))
    }

    pub fn uniform(n: usize) -> Self {
        ClassWeights(vec![1.0; n])
    }

    /// `w_g = 1 - frequency_g` from (possibly fractional) per-group pixel counts.
    pub fn from_frequencies(counts: &[f64]) -> (Self, Vec<WeightWarning>) {
        let total: f64 = counts.iter().sum();
        let probabilities: Vec<f64> = counts
            .iter()
            .map(|&n| if total > 0.0 { n / total } else { 0.0 })
            .collect();
        Self::from_probabilities(&probabilities)
    }

    /// `w_g = 1 - p_g` for given class probabilities.
    pub fn from_probabilities(probabilities: &[f64]) -> (Self, Vec<WeightWarning>) {
        let mut warnings = Vec::new();
        let weights = probabilities
            .iter()
            .enumerate()
            .map(|(g, &p)| {
                if p <= 0.0 {
                    warnings.push(WeightWarning::EmptyGroup(g as i8));
                    return 1.0;
                }
                let w = 1.0 - p;
                if w <= 0.0 {
                    warnings.push(WeightWarning::SoleGroup(g as i8));
                    return 0.0;
                }
                w
            })
            .collect();
        (ClassWeights(weights), warnings)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Complement-of-frequency weights over the five groups of hard training masks.
pub fn compute_class_weights(masks: &[LabelMask]) -> (ClassWeights, Vec<WeightWarning>) {
    let mut counts = [0.0f64; N_GROUPS];
    for m in masks {
        for &l in m.labels() {
            if l == UNLABELLED {
                continue;
            }
            let g = match m.kind() {
                LabelKind::Group => l,
                LabelKind::Class => LabelKind::Class
                    .group_of(l)
                    .expect("mask labels are validated"),
            };
            counts[g as usize] += 1.0;
        }
    }
    ClassWeights::from_frequencies(&counts)
}

/// Same as [`compute_class_weights`] but from fused group soft labels, counting
/// each supported pixel fractionally by its mean distribution.
pub fn class_weights_from_soft(softs: &[&SoftLabel]) -> (ClassWeights, Vec<WeightWarning>) {
    let mut counts = [0.0f64; N_GROUPS];
    for soft in softs {
        debug_assert_eq!(soft.kind(), LabelKind::Group);
        let hw = soft.shape().slice_len();
        for z in 0..soft.shape().depth {
            for p in 0..hw {
                if soft.support()[z * hw + p] == 0 {
                    continue;
                }
                for (g, c) in counts.iter_mut().enumerate() {
                    *c += soft.mean()[soft.plane_index(z, g, p)];
                }
            }
        }
    }
    ClassWeights::from_frequencies(&counts)
}
