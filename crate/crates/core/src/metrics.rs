//! Confusion accumulation and the segmentation metric suite.
//!
//! All counts are integers, so accumulation order and merging never change a
//! result. Ground-truth pixels carrying the unlabelled marker are skipped
//! everywhere.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::fusion::{average_annotation, FusionError};
use crate::opacity::{opacity_from_labels, OpacityGroups, OpacityLabel};
use crate::taxonomy::{LabelKind, GROUP_LUNG, UNLABELLED};
use crate::volume::{LabelMask, Shape3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("class {0} is not tracked by this accumulator")]
    UnknownClass(i8),
    #[error("prediction has {pred} pixels but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("cannot merge accumulators over different label sets")]
    LabelSetMismatch,
    #[error("ground-truth opacity volume is zero")]
    ZeroGroundTruthVolume,
    #[error("no lung or opacity voxels in the prediction")]
    ZeroLungVolume,
    #[error("at least 2 masks are required for agreement, got {0}")]
    TooFewMasks(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("pixel {pixel} of slice {slice} sums to {sum}, not 1")]
    NotNormalized {
        slice: usize,
        pixel: usize,
        sum: f64,
    },
    #[error("probability map has {got} values, expected {expected}")]
    BadProbLength { expected: usize, got: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Streaming per-class TP/FP/FN counts; TN follows from the evaluated total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    labels: Vec<i8>,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    total: u64,
}

/// Label IDs for binary opacity accumulators.
pub const NOT_OPACITY: i8 = 0;
pub const OPACITY: i8 = 1;

impl ConfusionAccumulator {
    /// Tracks labels `0..n_labels`.
    pub fn new(n_labels: usize) -> Self {
        Self::with_labels((0..n_labels as i8).collect())
    }

    pub fn with_labels(labels: Vec<i8>) -> Self {
        let n = labels.len();
        ConfusionAccumulator {
            labels,
            tp: vec![0; n],
            fp: vec![0; n],
            fn_: vec![0; n],
            total: 0,
        }
    }

    /// Two-label accumulator for opacity (1) versus everything else (0).
    pub fn binary() -> Self {
        Self::with_labels(vec![NOT_OPACITY, OPACITY])
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    fn slot(&self, label: i8) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Adds one (prediction, ground truth) pair. Unlabelled ground truth is skipped;
    /// a prediction outside the label set counts only as a miss.
    #[inline]
    pub fn push(&mut self, pred: i8, gt: i8) -> Result<(), MetricError> {
        if gt == UNLABELLED {
            return Ok(());
        }
        let g = self.slot(gt).ok_or(MetricError::UnknownClass(gt))?;
        let p = match self.slot(pred) {
            Some(p) => Some(p),
            None if pred == UNLABELLED => None,
            None => return Err(MetricError::UnknownClass(pred)),
        };
        self.total += 1;
        match p {
            Some(p) if p == g => self.tp[g] += 1,
            Some(p) => {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
            None => self.fn_[g] += 1,
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &[i8], gt: &[i8]) -> Result<(), MetricError> {
        if pred.len() != gt.len() {
            return Err(MetricError::LengthMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        pred.iter().zip(gt).try_for_each(|(&p, &g)| self.push(p, g))
    }

    /// Adds binary opacity pairs; ground-truth `None` is skipped.
    pub fn accumulate_binary(
        &mut self,
        pred: &[bool],
        gt: &[OpacityLabel],
    ) -> Result<(), MetricError> {
        if pred.len() != gt.len() {
            return Err(MetricError::LengthMismatch {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if let Some(g) = g {
                self.push(p as i8, g as i8)?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<(), MetricError> {
        if self.labels != other.labels {
            return Err(MetricError::LabelSetMismatch);
        }
        for i in 0..self.labels.len() {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        self.total += other.total;
        Ok(())
    }

    /// Number of evaluated pixels.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// `(tp, fp, fn, tn)` for one label.
    pub fn counts(&self, label: i8) -> Result<(u64, u64, u64, u64), MetricError> {
        let i = self.slot(label).ok_or(MetricError::UnknownClass(label))?;
        let (tp, fp, fn_) = (self.tp[i], self.fp[i], self.fn_[i]);
        Ok((tp, fp, fn_, self.total - tp - fp - fn_))
    }
}

/// `TP / (TP + FP + FN)`; `None` when the label is absent from both sides.
pub fn iou(acc: &ConfusionAccumulator, label: i8) -> Result<Option<f64>, MetricError> {
    let (tp, fp, fn_, _) = acc.counts(label)?;
    let union = tp + fp + fn_;
    Ok((union > 0).then(|| tp as f64 / union as f64))
}

/// Mean IOU over `labels`, skipping undefined values. `None` if all are undefined.
pub fn mean_iou(acc: &ConfusionAccumulator, labels: &[i8]) -> Result<Option<f64>, MetricError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &l in labels {
        if let Some(v) = iou(acc, l)? {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// `(TP + FP) / (TP + FN)` of the opacity label over everything accumulated.
pub fn relative_volume(acc: &ConfusionAccumulator) -> Result<f64, MetricError> {
    let (tp, fp, fn_, _) = acc.counts(OPACITY)?;
    if tp + fn_ == 0 {
        return Err(MetricError::ZeroGroundTruthVolume);
    }
    Ok((tp + fp) as f64 / (tp + fn_) as f64)
}

/// Fraction of lung-parenchyma voxels predicted as aerated lung:
/// `lung / (lung + opacity)` over group labels.
pub fn percent_wal(groups: &[i8], opacity: OpacityGroups) -> Result<f64, MetricError> {
    let (lung, opa) = lung_and_opacity_counts(groups, opacity);
    if lung + opa == 0 {
        return Err(MetricError::ZeroLungVolume);
    }
    Ok(lung as f64 / (lung + opa) as f64)
}

/// `(lung voxels, opacity voxels)` over group labels.
pub fn lung_and_opacity_counts(groups: &[i8], opacity: OpacityGroups) -> (u64, u64) {
    groups.iter().fold((0, 0), |(l, o), &g| {
        if g == GROUP_LUNG {
            (l + 1, o)
        } else if opacity.contains(g) {
            (l, o + 1)
        } else {
            (l, o)
        }
    })
}

/// Per-voxel class probabilities, stored slice by slice as `classes x height x width` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    shape: Shape3,
    n_classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Wraps probabilities, checking every voxel sums to one within 1e-6.
    pub fn new(shape: Shape3, n_classes: usize, data: Vec<f64>) -> Result<Self, MetricError> {
        let expected = shape.len() * n_classes;
        if data.len() != expected {
            return Err(MetricError::BadProbLength {
                expected,
                got: data.len(),
            });
        }
        let map = ProbMap {
            shape,
            n_classes,
            data,
        };
        let hw = shape.slice_len();
        for z in 0..shape.depth {
            for p in 0..hw {
                let sum: f64 = (0..n_classes).map(|c| map.get(z, c, p)).sum();
                if !((sum - 1.0).abs() <= 1e-6) {
                    return Err(MetricError::NotNormalized {
                        slice: z,
                        pixel: p,
                        sum,
                    });
                }
            }
        }
        Ok(map)
    }

    pub(crate) fn from_raw(shape: Shape3, n_classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len() * n_classes);
        ProbMap {
            shape,
            n_classes,
            data,
        }
    }

    /// One-hot probabilities of a group mask; unlabelled voxels become background.
    pub fn one_hot(mask: &LabelMask) -> Self {
        let n_classes = mask.kind().n_labels();
        let shape = mask.shape();
        let hw = shape.slice_len();
        let mut data = vec![0.0; shape.len() * n_classes];
        for z in 0..shape.depth {
            for (p, &l) in mask.slice(z).iter().enumerate() {
                let c = if l == UNLABELLED { 0 } else { l as usize };
                data[(z * n_classes + c) * hw + p] = 1.0;
            }
        }
        ProbMap {
            shape,
            n_classes,
            data,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, class: usize, pixel: usize) -> f64 {
        self.data[(z * self.n_classes + class) * self.shape.slice_len() + pixel]
    }

    /// Most probable group per voxel (lowest ID on ties).
    pub fn argmax(&self) -> Vec<i8> {
        let hw = self.shape.slice_len();
        let mut out = Vec::with_capacity(self.shape.len());
        for z in 0..self.shape.depth {
            for p in 0..hw {
                let mut best = 0;
                for c in 1..self.n_classes {
                    if self.get(z, c, p) > self.get(z, best, p) {
                        best = c;
                    }
                }
                out.push(best as i8);
            }
        }
        out
    }

    /// Opacity where the summed opacity-group mass exceeds the remaining mass.
    pub fn opacity_by_mass(&self, groups: OpacityGroups) -> Vec<bool> {
        let hw = self.shape.slice_len();
        let mut out = Vec::with_capacity(self.shape.len());
        for z in 0..self.shape.depth {
            for p in 0..hw {
                let (mut opa, mut rest) = (0.0, 0.0);
                for c in 0..self.n_classes {
                    let v = self.get(z, c, p);
                    if groups.contains(c as i8) {
                        opa += v;
                    } else {
                        rest += v;
                    }
                }
                out.push(opa > rest);
            }
        }
        out
    }

    /// Opacity where the most probable single group is an opacity group.
    pub fn opacity_by_argmax(&self, groups: OpacityGroups) -> Vec<bool> {
        self.argmax()
            .into_iter()
            .map(|g| groups.contains(g))
            .collect()
    }
}

fn check_same_shape(a: Shape3, b: Shape3) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::ShapeMismatch {
            left: a.as_array(),
            right: b.as_array(),
        });
    }
    Ok(())
}

/// Adds the binary opacity confusion of `probs` against a ground-truth mask.
pub fn accumulate_opacity(
    acc: &mut ConfusionAccumulator,
    probs: &ProbMap,
    gt: &LabelMask,
    groups: OpacityGroups,
) -> Result<(), MetricError> {
    check_same_shape(probs.shape(), gt.shape())?;
    let pred = probs.opacity_by_mass(groups);
    let truth = opacity_from_labels(gt.labels(), gt.kind(), groups);
    acc.accumulate_binary(&pred, &truth)
}

/// Binary opacity IOU with group masses combined before binarization.
pub fn opacity_iou(
    probs: &ProbMap,
    gt: &LabelMask,
    groups: OpacityGroups,
) -> Result<Option<f64>, MetricError> {
    let mut acc = ConfusionAccumulator::binary();
    accumulate_opacity(&mut acc, probs, gt, groups)?;
    iou(&acc, OPACITY)
}

/// Per-group accumulation of argmax predictions against a group mask.
pub fn accumulate_groups(
    acc: &mut ConfusionAccumulator,
    probs: &ProbMap,
    gt: &LabelMask,
) -> Result<(), MetricError> {
    check_same_shape(probs.shape(), gt.shape())?;
    acc.accumulate(&probs.argmax(), gt.labels())
}

/// IOU between two binary opacity labellings over pixels both labelled.
/// Returns 1 when neither marks any opacity.
pub fn binary_iou(a: &[OpacityLabel], b: &[OpacityLabel]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            inter += (*x && *y) as u64;
            union += (*x || *y) as u64;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Inter-observer opacity agreement.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix {
    pub annotator_ids: Vec<String>,
    /// Row-major `n x n` symmetric matrix with unit diagonal.
    pub pairwise: Vec<f64>,
    /// Opacity IOU of each annotator against the majority-vote annotation.
    pub vs_average: Vec<f64>,
}

impl AgreementMatrix {
    pub fn len(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotator_ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pairwise[i * self.len() + j]
    }

    /// Largest IOU of annotator `i` against any peer.
    pub fn max_peer(&self, i: usize) -> f64 {
        (0..self.len())
            .filter(|&j| j != i)
            .map(|j| self.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Whether annotator `i` agrees strictly more with the average than with any peer.
    pub fn closer_to_average(&self, i: usize) -> bool {
        self.vs_average[i] > self.max_peer(i)
    }
}

/// Pairwise and versus-average opacity IOU between annotators.
pub fn agreement(
    masks: &[LabelMask],
    groups: OpacityGroups,
) -> Result<AgreementMatrix, MetricError> {
    if masks.len() < 2 {
        return Err(MetricError::TooFewMasks(masks.len()));
    }
    for m in &masks[1..] {
        check_same_shape(masks[0].shape(), m.shape())?;
    }
    let binary: Vec<Vec<OpacityLabel>> = masks
        .iter()
        .map(|m| opacity_from_labels(m.labels(), m.kind(), groups))
        .collect();
    let n = masks.len();
    let mut pairwise = vec![0.0; n * n];
    for i in 0..n {
        pairwise[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = binary_iou(&binary[i], &binary[j]);
            pairwise[i * n + j] = v;
            pairwise[j * n + i] = v;
        }
    }
    let average = average_annotation(masks, groups)?;
    let vs_average = binary.iter().map(|b| binary_iou(b, &average)).collect();
    Ok(AgreementMatrix {
        annotator_ids: masks
            .iter()
            .map(|m| String::from(m.annotator_id()))
            .collect(),
        pairwise,
        vs_average,
    })
}

/// Per-group IOUs of a group prediction against a group mask.
pub fn group_ious(pred: &[i8], gt: &LabelMask) -> Result<Vec<Option<f64>>, MetricError> {
    let mut acc = ConfusionAccumulator::new(LabelKind::Group.n_labels());
    acc.accumulate(pred, gt.labels())?;
    (0..LabelKind::Group.n_labels() as i8)
        .map(|g| iou(&acc, g))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let mut acc = ConfusionAccumulator::new(2);
        acc.accumulate(&[1, 1, 0], &[1, 1, 0]).unwrap();
        assert_eq!(iou(&acc, 1).unwrap(), Some(1.0));

        // pred {a,b}, gt {b,c}
        let mut acc = ConfusionAccumulator::new(2);
        acc.accumulate(&[1, 1, 0], &[0, 1, 1]).unwrap();
        assert_eq!(acc.counts(1).unwrap(), (1, 1, 1, 0));
        assert_eq!(iou(&acc, 1).unwrap(), Some(1.0 / 3.0));

        let mut acc = ConfusionAccumulator::new(3);
        acc.accumulate(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(iou(&acc, 2).unwrap(), None);
        assert_eq!(iou(&acc, 7), Err(MetricError::UnknownClass(7)));
    }

    #[test]
    fn unlabelled_ground_truth_is_skipped() {
        let mut acc = ConfusionAccumulator::new(2);
        acc.accumulate(&[1, 1], &[-1, 1]).unwrap();
        assert_eq!(acc.total(), 1);
        assert_eq!(acc.counts(0).unwrap(), (0, 0, 0, 1));
    }

    #[test]
    fn mean_iou_skips_undefined() {
        let mut acc = ConfusionAccumulator::new(3);
        acc.accumulate(&[0, 1], &[0, 0]).unwrap();
        // class 0: 1/2, class 1: 0, class 2: undefined
        assert_eq!(mean_iou(&acc, &[0, 1, 2]).unwrap(), Some(0.25));
    }

    #[test]
    fn opacity_mass_rule() {
        // p(g2)=0.3, p(g3)=0.25, p(g1)=0.45
        let probs = ProbMap::new(Shape3::new(1, 1, 1), 5, vec![0.0, 0.45, 0.3, 0.25, 0.0]).unwrap();
        assert_eq!(probs.opacity_by_mass(OpacityGroups::default()), vec![true]);
        assert_eq!(
            probs.opacity_by_argmax(OpacityGroups::default()),
            vec![false]
        );
    }

    #[test]
    fn opacity_iou_of_exact_prediction() {
        let gt = LabelMask::new(
            Shape3::new(1, 2, 2),
            LabelKind::Group,
            "gt",
            vec![0, 1, 2, 4],
        )
        .unwrap();
        let v = opacity_iou(&ProbMap::one_hot(&gt), &gt, OpacityGroups::default()).unwrap();
        assert_eq!(v, Some(1.0));
    }

    #[test]
    fn relative_volume_depends_on_volumes_only() {
        let mut acc = ConfusionAccumulator::binary();
        let gt: Vec<OpacityLabel> = (0..3000).map(|i| Some(i < 1000)).collect();
        // shifted prediction with 1017 voxels
        let pred: Vec<bool> = (0..3000).map(|i| (500..1517).contains(&i)).collect();
        acc.accumulate_binary(&pred, &gt).unwrap();
        assert!((relative_volume(&acc).unwrap() - 1.017).abs() < 1e-12);

        let empty = ConfusionAccumulator::binary();
        assert_eq!(
            relative_volume(&empty),
            Err(MetricError::ZeroGroundTruthVolume)
        );
    }

    #[test]
    fn percent_wal_examples() {
        let g = OpacityGroups::default();
        assert_eq!(percent_wal(&[0, 1, 1, 0], g).unwrap(), 1.0);
        let mut v = vec![1i8; 900];
        v.extend(vec![3i8; 100]);
        assert_eq!(percent_wal(&v, g).unwrap(), 0.9);
        assert_eq!(percent_wal(&[2, 4, 0], g).unwrap(), 0.0);
        assert_eq!(percent_wal(&[0, 0], g), Err(MetricError::ZeroLungVolume));
    }

    #[test]
    fn agreement_examples() {
        let g = OpacityGroups::default();
        let shape = Shape3::new(1, 1, 3);
        let a = LabelMask::new(shape, LabelKind::Group, "a", vec![2, 2, 1]).unwrap();
        let b = LabelMask::new(shape, LabelKind::Group, "b", vec![1, 2, 2]).unwrap();
        let m = agreement(&[a.clone(), a.clone()], g).unwrap();
        assert_eq!(m.pairwise, vec![1.0; 4]);
        let m = agreement(&[a.clone(), b], g).unwrap();
        assert_eq!(m.get(0, 1), 1.0 / 3.0);
        assert_eq!(m.get(1, 0), 1.0 / 3.0);
        assert!(matches!(
            agreement(&[a], g),
            Err(MetricError::TooFewMasks(1))
        ));
    }

    #[test]
    fn prob_map_rejects_unnormalized() {
        assert!(matches!(
            ProbMap::new(Shape3::new(1, 1, 1), 2, vec![0.5, 0.4]),
            Err(MetricError::NotNormalized { .. })
        ));
    }

    #[test]
    fn merge_requires_same_labels() {
        let mut a = ConfusionAccumulator::new(2);
        assert_eq!(
            a.merge(&ConfusionAccumulator::new(3)),
            Err(MetricError::LabelSetMismatch)
        );
    }
}
