use alloc::vec::Vec;

use super::train::{TrainSample, ValSample};
use crate::fusion::{gaussian_target, FusionError, SoftLabel};
use crate::taxonomy::LabelKind;
use crate::volume::{preprocess_slice, CtVolume, LabelMask, NormStats, VolumeError, Window};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("labels cover {labels:?} but the volume is {volume:?}")]
    ShapeMismatch {
        labels: [usize; 3],
        volume: [usize; 3],
    },
    #[error("training targets must be group-level")]
    NotGroups,
}

/// Preprocessing shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Preprocess {
    pub window: Window,
    pub stats: NormStats,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            window: Window::LUNG,
            stats: NormStats::REFERENCE,
        }
    }
}

/// One training sample per slice carrying at least one annotated pixel.
///
/// Targets are the fused means; pixel weights come from the annotators'
/// disagreement (see [`gaussian_target`]).
pub fn train_samples(
    volume: &CtVolume,
    soft: &SoftLabel,
    confidence_epsilon: f64,
    prep: Preprocess,
) -> Result<Vec<TrainSample>, DatasetError> {
    if soft.kind() != LabelKind::Group {
        return Err(DatasetError::NotGroups);
    }
    if soft.shape() != volume.shape() {
        return Err(DatasetError::ShapeMismatch {
            labels: soft.shape().as_array(),
            volume: volume.shape().as_array(),
        });
    }
    let target = gaussian_target(soft, confidence_epsilon)?;
    let mut out = Vec::new();
    for z in 0..volume.shape().depth {
        let support = soft.slice_support(z);
        if support.iter().all(|&s| s == 0) {
            continue;
        }
        out.push(TrainSample {
            input: preprocess_slice(volume, z, prep.window, prep.stats)?,
            target: target.slice_target(z).to_vec(),
            pixel_weight: target.slice_weight(z).to_vec(),
            supported: support.iter().map(|&s| s > 0).collect(),
        });
    }
    Ok(out)
}

/// One validation sample per labelled slice of a group mask.
pub fn val_samples(
    volume: &CtVolume,
    truth: &LabelMask,
    prep: Preprocess,
) -> Result<Vec<ValSample>, DatasetError> {
    if truth.kind() != LabelKind::Group {
        return Err(DatasetError::NotGroups);
    }
    truth.check_aligned(volume)?;
    truth
        .labelled_slices()
        .iter()
        .map(|&z| {
            Ok(ValSample {
                input: preprocess_slice(volume, z, prep.window, prep.stats)?,
                truth: truth.slice(z).to_vec(),
            })
        })
        .collect()
}

/// Every slice of a volume, preprocessed for inference.
pub fn inference_slices(
    volume: &CtVolume,
    prep: Preprocess,
) -> Result<Vec<crate::volume::NormalizedSlice>, DatasetError> {
    (0..volume.shape().depth)
        .map(|z| Ok(preprocess_slice(volume, z, prep.window, prep.stats)?))
        .collect()
}
