//! CT volumes, label masks and slice preprocessing.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::taxonomy::{ClassTaxonomy, LabelKind, UNLABELLED};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VolumeError {
    #[error("shape components must be >= 1, got {0:?}")]
    EmptyShape([usize; 3]),
    #[error("spacing components must be > 0, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("voxel count {actual} does not match shape product {expected}")]
    VoxelCountMismatch { expected: usize, actual: usize },
    #[error("window low {low} must be below high {high}")]
    InvalidWindow { low: i16, high: i16 },
    #[error("normalization std must be > 0, got {0}")]
    NonPositiveStd(f64),
    #[error("pixel {index} value {value} HU lies outside window [{low}, {high}]")]
    OutsideWindow {
        index: usize,
        value: i16,
        low: i16,
        high: i16,
    },
    #[error("invalid {kind} ID {value} at voxel {index}")]
    InvalidLabel {
        value: i8,
        index: usize,
        kind: LabelKind,
    },
    #[error("slice {slice} is not in the labelled set but carries labels")]
    UnlabelledSliceHasLabels { slice: usize },
    #[error("slice index {slice} out of range for depth {depth}")]
    SliceOutOfRange { slice: usize, depth: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("expected a {expected} mask, got a {actual} mask")]
    KindMismatch {
        expected: LabelKind,
        actual: LabelKind,
    },
    #[error("no voxels to compute statistics over")]
    NoVoxels,
}

/// Volume extent ordered z, y, x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape3 {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Shape3 {
            depth,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    fn validate(&self) -> Result<(), VolumeError> {
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(VolumeError::EmptyShape(self.as_array()));
        }
        Ok(())
    }
}

impl From<[usize; 3]> for Shape3 {
    fn from(a: [usize; 3]) -> Self {
        Shape3::new(a[0], a[1], a[2])
    }
}

/// A CT volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    shape: Shape3,
    spacing_mm: [f64; 3],
    voxels: Vec<i16>,
}

impl CtVolume {
    pub fn new(shape: Shape3, spacing_mm: [f64; 3], voxels: Vec<i16>) -> Result<Self, VolumeError> {
        shape.validate()?;
        if spacing_mm.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::NonPositiveSpacing(spacing_mm));
        }
        if voxels.len() != shape.len() {
            return Err(VolumeError::VoxelCountMismatch {
                expected: shape.len(),
                actual: voxels.len(),
            });
        }
        Ok(CtVolume {
            shape,
            spacing_mm,
            voxels,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<i16> {
        self.voxels
    }

    pub fn slice(&self, z: usize) -> &[i16] {
        let n = self.shape.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }
}

/// Per-voxel class or group IDs, aligned to a [`CtVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    shape: Shape3,
    kind: LabelKind,
    annotator_id: String,
    labelled_slices: BTreeSet<usize>,
    labels: Vec<i8>,
}

impl LabelMask {
    /// Builds a mask whose labelled slices are those containing any value other
    /// than the unlabelled marker.
    pub fn new(
        shape: Shape3,
        kind: LabelKind,
        annotator_id: impl Into<String>,
        labels: Vec<i8>,
    ) -> Result<Self, VolumeError> {
        shape.validate()?;
        if labels.len() != shape.len() {
            return Err(VolumeError::VoxelCountMismatch {
                expected: shape.len(),
                actual: labels.len(),
            });
        }
        validate_labels(&labels, kind)?;
        let n = shape.slice_len();
        let labelled_slices = (0..shape.depth)
            .filter(|&z| labels[z * n..(z + 1) * n].iter().any(|&l| l != UNLABELLED))
            .collect();
        Ok(LabelMask {
            shape,
            kind,
            annotator_id: annotator_id.into(),
            labelled_slices,
            labels,
        })
    }

    /// Builds a mask with an explicit labelled-slice set. Slices outside the set
    /// must hold only the unlabelled marker.
    pub fn with_labelled_slices(
        shape: Shape3,
        kind: LabelKind,
        annotator_id: impl Into<String>,
        labels: Vec<i8>,
        labelled_slices: BTreeSet<usize>,
    ) -> Result<Self, VolumeError> {
        let mut mask = Self::new(shape, kind, annotator_id, labels)?;
        if let Some(&z) = labelled_slices.iter().find(|&&z| z >= shape.depth) {
            return Err(VolumeError::SliceOutOfRange {
                slice: z,
                depth: shape.depth,
            });
        }
        if let Some(&z) = mask.labelled_slices.difference(&labelled_slices).next() {
            return Err(VolumeError::UnlabelledSliceHasLabels { slice: z });
        }
        mask.labelled_slices = labelled_slices;
        Ok(mask)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn annotator_id(&self) -> &str {
        &self.annotator_id
    }

    pub fn set_annotator_id(&mut self, id: impl Into<String>) {
        self.annotator_id = id.into();
    }

    pub fn labelled_slices(&self) -> &BTreeSet<usize> {
        &self.labelled_slices
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn slice(&self, z: usize) -> &[i8] {
        let n = self.shape.slice_len();
        &self.labels[z * n..(z + 1) * n]
    }

    /// Extracts slice `z` as a single-slice mask.
    pub fn slice_mask(&self, z: usize) -> Result<LabelMask, VolumeError> {
        if z >= self.shape.depth {
            return Err(VolumeError::SliceOutOfRange {
                slice: z,
                depth: self.shape.depth,
            });
        }
        LabelMask::new(
            Shape3::new(1, self.shape.height, self.shape.width),
            self.kind,
            self.annotator_id.clone(),
            self.slice(z).to_vec(),
        )
    }

    /// Checks this mask is aligned with a CT volume.
    pub fn check_aligned(&self, volume: &CtVolume) -> Result<(), VolumeError> {
        if self.shape != volume.shape() {
            return Err(VolumeError::ShapeMismatch {
                left: self.shape.as_array(),
                right: volume.shape().as_array(),
            });
        }
        Ok(())
    }

    /// Replaces class IDs by group IDs.
    pub fn to_groups(&self, taxonomy: &ClassTaxonomy) -> Result<LabelMask, VolumeError> {
        class_to_group(self, taxonomy)
    }

    /// Voxel count per label, index 0 holding the unlabelled count.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = alloc::vec![0u64; self.kind.n_labels() + 1];
        for &l in &self.labels {
            counts[(l + 1) as usize] += 1;
        }
        counts
    }
}

fn validate_labels(labels: &[i8], kind: LabelKind) -> Result<(), VolumeError> {
    match labels.iter().position(|&l| !kind.is_valid(l)) {
        Some(index) => Err(VolumeError::InvalidLabel {
            value: labels[index],
            index,
            kind,
        }),
        None => Ok(()),
    }
}

/// Maps raw class IDs to group IDs, failing on the first unknown class.
pub fn groups_from_classes(
    classes: &[i8],
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<i8>, VolumeError> {
    classes
        .iter()
        .enumerate()
        .map(|(index, &c)| {
            taxonomy.group_of(c).ok_or(VolumeError::InvalidLabel {
                value: c,
                index,
                kind: LabelKind::Class,
            })
        })
        .collect()
}

/// Collapses a class mask into a group mask. Group masks are returned unchanged.
pub fn class_to_group(
    mask: &LabelMask,
    taxonomy: &ClassTaxonomy,
) -> Result<LabelMask, VolumeError> {
    if mask.kind == LabelKind::Group {
        return Ok(mask.clone());
    }
    let labels = groups_from_classes(&mask.labels, taxonomy)?;
    Ok(LabelMask {
        shape: mask.shape,
        kind: LabelKind::Group,
        annotator_id: mask.annotator_id.clone(),
        labelled_slices: mask.labelled_slices.clone(),
        labels,
    })
}

/// An intensity window in HU, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Window {
    pub low: i16,
    pub high: i16,
}

impl Window {
    pub const LUNG: Window = Window {
        low: -1000,
        high: 350,
    };

    pub fn new(low: i16, high: i16) -> Result<Self, VolumeError> {
        if low >= high {
            return Err(VolumeError::InvalidWindow { low, high });
        }
        Ok(Window { low, high })
    }

    #[inline]
    pub fn clamp(&self, hu: i16) -> i16 {
        hu.clamp(self.low, self.high)
    }

    pub fn contains(&self, hu: i16) -> bool {
        (self.low..=self.high).contains(&hu)
    }
}

impl Default for Window {
    fn default() -> Self {
        Window::LUNG
    }
}

/// Global normalization constants in HU.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Training-set constants of the reference lung-window pipeline.
    pub const REFERENCE: NormStats = NormStats {
        mean: -653.2,
        std: 628.5,
    };

    pub fn new(mean: f64, std: f64) -> Result<Self, VolumeError> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(VolumeError::NonPositiveStd(std));
        }
        Ok(NormStats { mean, std })
    }

    #[inline]
    pub fn apply(&self, hu: f64) -> f64 {
        (hu - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, value: f64) -> f64 {
        value * self.std + self.mean
    }
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats::REFERENCE
    }
}

/// A windowed, normalized 2D slice ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSlice {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub window: Window,
    pub stats: NormStats,
}

impl NormalizedSlice {
    /// Value range every pixel is guaranteed to lie in.
    pub fn bounds(&self) -> (f64, f64) {
        (
            self.stats.apply(self.window.low as f64),
            self.stats.apply(self.window.high as f64),
        )
    }

    /// Maps values back to (windowed) HU.
    pub fn denormalize(&self) -> Vec<f64> {
        self.values.iter().map(|&v| self.stats.invert(v)).collect()
    }
}

/// Clamps every voxel into the window.
pub fn apply_lung_window(volume: &CtVolume, low: i16, high: i16) -> Result<CtVolume, VolumeError> {
    let window = Window::new(low, high)?;
    Ok(CtVolume {
        shape: volume.shape,
        spacing_mm: volume.spacing_mm,
        voxels: volume.voxels.iter().map(|&v| window.clamp(v)).collect(),
    })
}

/// Normalizes an already windowed slice with global constants.
pub fn normalize(
    pixels: &[i16],
    height: usize,
    width: usize,
    window: Window,
    stats: NormStats,
) -> Result<NormalizedSlice, VolumeError> {
    let stats = NormStats::new(stats.mean, stats.std)?;
    if pixels.len() != height * width {
        return Err(VolumeError::VoxelCountMismatch {
            expected: height * width,
            actual: pixels.len(),
        });
    }
    if let Some(index) = pixels.iter().position(|&p| !window.contains(p)) {
        return Err(VolumeError::OutsideWindow {
            index,
            value: pixels[index],
            low: window.low,
            high: window.high,
        });
    }
    Ok(NormalizedSlice {
        height,
        width,
        values: pixels.iter().map(|&p| stats.apply(p as f64)).collect(),
        window,
        stats,
    })
}

/// Windows then normalizes slice `z` of a raw volume.
pub fn preprocess_slice(
    volume: &CtVolume,
    z: usize,
    window: Window,
    stats: NormStats,
) -> Result<NormalizedSlice, VolumeError> {
    let shape = volume.shape();
    if z >= shape.depth {
        return Err(VolumeError::SliceOutOfRange {
            slice: z,
            depth: shape.depth,
        });
    }
    let windowed: Vec<i16> = volume.slice(z).iter().map(|&v| window.clamp(v)).collect();
    normalize(&windowed, shape.height, shape.width, window, stats)
}

/// Mean and population standard deviation of windowed voxels over a set of volumes.
pub fn intensity_stats<'a, I>(volumes: I, window: Window) -> Result<NormStats, VolumeError>
where
    I: IntoIterator<Item = &'a CtVolume> + Clone,
{
    let mut count = 0u64;
    let mut sum = 0i64;
    for v in volumes.clone() {
        count += v.voxels.len() as u64;
        sum += v
            .voxels
            .iter()
            .map(|&x| window.clamp(x) as i64)
            .sum::<i64>();
    }
    if count == 0 {
        return Err(VolumeError::NoVoxels);
    }
    let mean = sum as f64 / count as f64;
    let mut ss = 0.0;
    for v in volumes {
        ss += v
            .voxels
            .iter()
            .map(|&x| {
                let d = window.clamp(x) as f64 - mean;
                d * d
            })
            .sum::<f64>();
    }
    NormStats::new(mean, libm::sqrt(ss / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vol(voxels: Vec<i16>) -> CtVolume {
        let n = voxels.len();
        CtVolume::new(Shape3::new(1, 1, n), [1.0, 1.0, 1.0], voxels).unwrap()
    }

    #[test]
    fn window_examples() {
        let v = apply_lung_window(&vol(vec![-1200, -500, 3000]), -1000, 350).unwrap();
        assert_eq!(v.voxels(), &[-1000, -500, 350]);
    }

    #[test]
    fn window_rejects_inverted_bounds() {
        assert!(matches!(
            apply_lung_window(&vol(vec![0]), 350, 350),
            Err(VolumeError::InvalidWindow { .. })
        ));
        assert!(apply_lung_window(&vol(vec![0]), 400, -1000).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = normalize(&[350, -1000], 1, 2, Window::LUNG, NormStats::REFERENCE).unwrap();
        assert!((s.values[0] - (350.0 + 653.2) / 628.5).abs() < 1e-12);
        assert!((s.values[0] - 1.59619).abs() < 1e-5);
        assert!((s.values[1] - (-0.55179)).abs() < 1e-5);
        assert_eq!(NormStats::REFERENCE.apply(-653.2), 0.0);
    }

    #[test]
    fn normalize_rejects_bad_std_and_unwindowed() {
        assert!(matches!(
            normalize(
                &[0],
                1,
                1,
                Window::LUNG,
                NormStats {
                    mean: 0.0,
                    std: 0.0
                }
            ),
            Err(VolumeError::NonPositiveStd(_))
        ));
        assert!(matches!(
            normalize(
                &[0],
                1,
                1,
                Window::LUNG,
                NormStats {
                    mean: 0.0,
                    std: -1.0
                }
            ),
            Err(VolumeError::NonPositiveStd(_))
        ));
        assert!(matches!(
            normalize(&[0, 2000], 1, 2, Window::LUNG, NormStats::REFERENCE),
            Err(VolumeError::OutsideWindow {
                index: 1,
                value: 2000,
                ..
            })
        ));
    }

    #[test]
    fn class_to_group_examples() {
        let t = ClassTaxonomy;
        let m = LabelMask::new(
            Shape3::new(1, 1, 4),
            LabelKind::Class,
            "a",
            vec![7, 0, 9, -1],
        )
        .unwrap();
        let g = class_to_group(&m, &t).unwrap();
        assert_eq!(g.labels(), &[3, 0, 4, -1]);
        assert_eq!(g.kind(), LabelKind::Group);
        assert_eq!(g.shape(), m.shape());
    }

    #[test]
    fn unknown_class_names_value_and_index() {
        let err = groups_from_classes(&[0, 1, 11], &ClassTaxonomy).unwrap_err();
        assert_eq!(
            err,
            VolumeError::InvalidLabel {
                value: 11,
                index: 2,
                kind: LabelKind::Class
            }
        );
        let err =
            LabelMask::new(Shape3::new(1, 1, 2), LabelKind::Group, "a", vec![0, 5]).unwrap_err();
        assert_eq!(
            err,
            VolumeError::InvalidLabel {
                value: 5,
                index: 1,
                kind: LabelKind::Group
            }
        );
    }

    #[test]
    fn volume_invariants() {
        assert!(CtVolume::new(Shape3::new(0, 2, 2), [1.0; 3], vec![]).is_err());
        assert!(CtVolume::new(Shape3::new(1, 2, 2), [1.0, 0.0, 1.0], vec![0; 4]).is_err());
        assert!(CtVolume::new(Shape3::new(1, 2, 2), [1.0; 3], vec![0; 3]).is_err());
    }

    #[test]
    fn labelled_slices_inferred_and_checked() {
        let shape = Shape3::new(3, 1, 2);
        let m = LabelMask::new(shape, LabelKind::Class, "a", vec![-1, -1, 0, 1, -1, -1]).unwrap();
        assert_eq!(
            m.labelled_slices().iter().copied().collect::<Vec<_>>(),
            vec![1]
        );
        let err = LabelMask::with_labelled_slices(
            shape,
            LabelKind::Class,
            "a",
            vec![0, -1, 0, 1, -1, -1],
            [1].into_iter().collect(),
        )
        .unwrap_err();
        assert_eq!(err, VolumeError::UnlabelledSliceHasLabels { slice: 0 });
    }

    #[test]
    fn stats_pass_matches_hand_computation() {
        let a = vol(vec![-1000, 0]);
        let b = vol(vec![350, 2000]);
        let s = intensity_stats([&a, &b], Window::LUNG).unwrap();
        // windowed: -1000, 0, 350, 350
        let mean = (-1000.0 + 0.0 + 350.0 + 350.0) / 4.0;
        let var = [(-1000.0f64), 0.0, 350.0, 350.0]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / 4.0;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.std - libm::sqrt(var)).abs() < 1e-9);
    }
}
