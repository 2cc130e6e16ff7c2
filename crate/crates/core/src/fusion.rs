//! Probabilistic labels from several annotators.
//!
//! Each annotator's hard label at a pixel is treated as a one-hot sample of an
//! unknown per-pixel categorical distribution. Fusion keeps the first and second
//! moments of those samples: the per-class mean and the per-class population
//! standard deviation. Annotators that left a pixel unlabelled do not count
//! towards that pixel's support.

use alloc::vec;
use alloc::vec::Vec;

use crate::opacity::{OpacityGroups, OpacityLabel};
use crate::taxonomy::{LabelKind, UNLABELLED};
use crate::volume::{LabelMask, Shape3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("at least {required} masks are required, got {got}")]
    TooFewMasks { required: usize, got: usize },
    #[error("mask {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("mask {index} holds {got} labels, expected {expected} labels")]
    KindMismatch {
        index: usize,
        expected: LabelKind,
        got: LabelKind,
    },
    #[error("too many annotators ({0}); at most 65535 are supported")]
    TooManyAnnotators(usize),
    #[error("epsilon must be > 0, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("invalid soft label: {0}")]
    Invalid(&'static str),
}

/// Fused per-pixel categorical mean and standard deviation.
///
/// Both maps are stored slice by slice as `labels x height x width` planes.
/// Pixels with zero support carry zeros in both maps and are reported as
/// having no target.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    shape: Shape3,
    kind: LabelKind,
    n_annotators: usize,
    support: Vec<u16>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl SoftLabel {
    /// Reassembles a soft label from stored planes, checking its invariants.
    pub fn from_parts(
        shape: Shape3,
        kind: LabelKind,
        n_annotators: usize,
        support: Vec<u16>,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self, FusionError> {
        let planes = shape.len() * kind.n_labels();
        if support.len() != shape.len() || mean.len() != planes || std.len() != planes {
            return Err(FusionError::Invalid("plane sizes do not match the shape"));
        }
        let soft = SoftLabel {
            shape,
            kind,
            n_annotators,
            support,
            mean,
            std,
        };
        soft.validate()?;
        Ok(soft)
    }

    fn validate(&self) -> Result<(), FusionError> {
        let c = self.n_labels();
        let hw = self.shape.slice_len();
        for z in 0..self.shape.depth {
            for p in 0..hw {
                let supported = self.support[z * hw + p] > 0;
                let mut sum = 0.0;
                for k in 0..c {
                    let i = (z * c + k) * hw + p;
                    let (m, s) = (self.mean[i], self.std[i]);
                    if !(0.0..=1.0).contains(&m) || !(0.0..=0.5 + 1e-12).contains(&s) {
                        return Err(FusionError::Invalid("mean or std out of range"));
                    }
                    if !supported && (m != 0.0 || s != 0.0) {
                        return Err(FusionError::Invalid(
                            "unsupported pixel carries a distribution",
                        ));
                    }
                    sum += m;
                }
                if supported && (sum - 1.0).abs() > 1e-6 {
                    return Err(FusionError::Invalid(
                        "pixel distribution does not sum to one",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn n_labels(&self) -> usize {
        self.kind.n_labels()
    }

    pub fn n_annotators(&self) -> usize {
        self.n_annotators
    }

    pub fn support(&self) -> &[u16] {
        &self.support
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Index into the mean/std planes.
    #[inline]
    pub fn plane_index(&self, z: usize, label: usize, pixel: usize) -> usize {
        (z * self.n_labels() + label) * self.shape.slice_len() + pixel
    }

    /// Mean planes of slice `z` (`labels x height x width`).
    pub fn slice_mean(&self, z: usize) -> &[f64] {
        let n = self.n_labels() * self.shape.slice_len();
        &self.mean[z * n..(z + 1) * n]
    }

    pub fn slice_std(&self, z: usize) -> &[f64] {
        let n = self.n_labels() * self.shape.slice_len();
        &self.std[z * n..(z + 1) * n]
    }

    pub fn slice_support(&self, z: usize) -> &[u16] {
        let n = self.shape.slice_len();
        &self.support[z * n..(z + 1) * n]
    }

    /// Target distribution at voxel `(z, pixel)`, or `None` without support.
    pub fn target_at(&self, z: usize, pixel: usize) -> Option<Vec<f64>> {
        if self.support[z * self.shape.slice_len() + pixel] == 0 {
            return None;
        }
        Some(
            (0..self.n_labels())
                .map(|k| self.mean[self.plane_index(z, k, pixel)])
                .collect(),
        )
    }

    /// Summed mean mass over the opacity groups per voxel; `None` without support.
    pub fn opacity_mass(&self, groups: OpacityGroups) -> Vec<Option<f64>> {
        let hw = self.shape.slice_len();
        let members: Vec<usize> = (0..self.n_labels())
            .filter(|&k| {
                self.kind
                    .group_of(k as i8)
                    .is_some_and(|g| groups.contains(g))
            })
            .collect();
        let mut out = Vec::with_capacity(self.shape.len());
        for z in 0..self.shape.depth {
            for p in 0..hw {
                if self.support[z * hw + p] == 0 {
                    out.push(None);
                } else {
                    out.push(Some(
                        members
                            .iter()
                            .map(|&k| self.mean[self.plane_index(z, k, p)])
                            .sum(),
                    ));
                }
            }
        }
        out
    }

    /// Most probable label per voxel (lowest ID on ties), unlabelled without support.
    pub fn argmax_mask(&self) -> LabelMask {
        let hw = self.shape.slice_len();
        let mut labels = vec![UNLABELLED; self.shape.len()];
        for z in 0..self.shape.depth {
            for p in 0..hw {
                if self.support[z * hw + p] == 0 {
                    continue;
                }
                let mut best = 0;
                for k in 1..self.n_labels() {
                    if self.mean[self.plane_index(z, k, p)]
                        > self.mean[self.plane_index(z, best, p)]
                    {
                        best = k;
                    }
                }
                labels[z * hw + p] = best as i8;
            }
        }
        LabelMask::new(self.shape, self.kind, "fused-argmax", labels)
            .expect("argmax labels are valid")
    }
}

fn check_geometry(
    masks: &[LabelMask],
    required: usize,
) -> Result<(Shape3, LabelKind), FusionError> {
    if masks.len() < required {
        return Err(FusionError::TooFewMasks {
            required,
            got: masks.len(),
        });
    }
    if masks.len() > u16::MAX as usize {
        return Err(FusionError::TooManyAnnotators(masks.len()));
    }
    let shape = masks[0].shape();
    let kind = masks[0].kind();
    for (index, m) in masks.iter().enumerate() {
        if m.shape() != shape {
            return Err(FusionError::ShapeMismatch {
                index,
                expected: shape.as_array(),
                got: m.shape().as_array(),
            });
        }
        if m.kind() != kind {
            return Err(FusionError::KindMismatch {
                index,
                expected: kind,
                got: m.kind(),
            });
        }
    }
    Ok((shape, kind))
}

/// Fuses annotator masks over identical geometry into per-pixel moments.
pub fn fuse(masks: &[LabelMask]) -> Result<SoftLabel, FusionError> {
    let (shape, kind) = check_geometry(masks, 1)?;
    let c = kind.n_labels();
    let hw = shape.slice_len();
    let mut support = vec![0u16; shape.len()];
    let mut mean = vec![0.0; shape.len() * c];
    let mut std = vec![0.0; shape.len() * c];
    let mut counts = vec![0u16; c];
    for z in 0..shape.depth {
        for p in 0..hw {
            let v = z * hw + p;
            counts.iter_mut().for_each(|k| *k = 0);
            let mut n = 0u16;
            for m in masks {
                let l = m.labels()[v];
                if l != UNLABELLED {
                    counts[l as usize] += 1;
                    n += 1;
                }
            }
            support[v] = n;
            if n == 0 {
                continue;
            }
            let nf = n as f64;
            for (k, &hits) in counts.iter().enumerate() {
                let mu = hits as f64 / nf;
                // population variance of `hits` ones and `n - hits` zeros
                let ones = hits as f64 * (1.0 - mu) * (1.0 - mu);
                let zeros = (n - hits) as f64 * mu * mu;
                let i = (z * c + k) * hw + p;
                mean[i] = mu;
                std[i] = libm::sqrt((ones + zeros) / nf);
            }
        }
    }
    Ok(SoftLabel {
        shape,
        kind,
        n_annotators: masks.len(),
        support,
        mean,
        std,
    })
}

/// Majority opacity vote across annotators ("average annotation").
///
/// A pixel is opacity when at least half of the annotators that labelled it
/// marked an opacity group; pixels nobody labelled stay unlabelled.
pub fn average_annotation(
    masks: &[LabelMask],
    groups: OpacityGroups,
) -> Result<Vec<OpacityLabel>, FusionError> {
    let (shape, kind) = check_geometry(masks, 2)?;
    let mut out = Vec::with_capacity(shape.len());
    for v in 0..shape.len() {
        let mut n = 0usize;
        let mut hits = 0usize;
        for m in masks {
            if let Some(is_opacity) = groups.classify(m.labels()[v], kind) {
                n += 1;
                hits += is_opacity as usize;
            }
        }
        out.push((n > 0).then_some(2 * hits >= n));
    }
    Ok(out)
}

/// Unnormalized pixel confidence `1 / (mean variance + epsilon)`.
pub fn confidence_weight<I: IntoIterator<Item = f64>>(stds: I, epsilon: f64) -> f64 {
    let (sum, n) = stds
        .into_iter()
        .fold((0.0, 0usize), |(s, n), sd| (s + sd * sd, n + 1));
    let mean_var = if n == 0 { 0.0 } else { sum / n as f64 };
    1.0 / (mean_var + epsilon)
}

/// Training target derived from a soft label.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    pub shape: Shape3,
    pub n_labels: usize,
    /// Target distribution, laid out like [`SoftLabel::mean`].
    pub target: Vec<f64>,
    /// Per-voxel weight; zero where no annotator labelled the voxel.
    pub weight: Vec<f64>,
}

impl GaussianTarget {
    pub fn slice_target(&self, z: usize) -> &[f64] {
        let n = self.n_labels * self.shape.slice_len();
        &self.target[z * n..(z + 1) * n]
    }

    pub fn slice_weight(&self, z: usize) -> &[f64] {
        let n = self.shape.slice_len();
        &self.weight[z * n..(z + 1) * n]
    }
}

/// Turns fused moments into a target distribution and per-pixel confidence.
///
/// The target is the fused mean. The confidence is the inverse of the mean
/// per-class variance plus `epsilon`, rescaled to average 1 over supported
/// voxels.
pub fn gaussian_target(soft: &SoftLabel, epsilon: f64) -> Result<GaussianTarget, FusionError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(FusionError::NonPositiveEpsilon(epsilon));
    }
    let shape = soft.shape();
    let c = soft.n_labels();
    let hw = shape.slice_len();
    let mut weight = vec![0.0; shape.len()];
    let mut total = 0.0;
    let mut supported = 0usize;
    for z in 0..shape.depth {
        for p in 0..hw {
            let v = z * hw + p;
            if soft.support[v] == 0 {
                continue;
            }
            let w = confidence_weight((0..c).map(|k| soft.std[soft.plane_index(z, k, p)]), epsilon);
            weight[v] = w;
            total += w;
            supported += 1;
        }
    }
    if supported > 0 {
        let scale = supported as f64 / total;
        weight.iter_mut().for_each(|w| *w *= scale);
    }
    Ok(GaussianTarget {
        shape,
        n_labels: c,
        target: soft.mean.clone(),
        weight,
    })
}
