//! Core algorithms for pulmonary opacity segmentation on chest CT.
//!
//! Everything here is pure computation over in-memory buffers and builds
//! without `std`: the class/group taxonomy, lung windowing and normalization,
//! multi-annotator label fusion, the metric suite, a small trainable
//! encoder-decoder with hand-written backpropagation, and synthetic phantoms
//! with simulated annotators. File formats and the command line live in the
//! `opaseg` crate.

#![no_std]
// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod fusion;
pub mod metrics;
pub mod opacity;
pub mod phantom;
pub mod segnet;
pub mod split;
pub mod taxonomy;
pub mod volume;

pub use fusion::{average_annotation, fuse, gaussian_target, GaussianTarget, SoftLabel};
pub use metrics::{
    agreement, iou, opacity_iou, percent_wal, relative_volume, AgreementMatrix,
    ConfusionAccumulator, ProbMap,
};
pub use opacity::OpacityGroups;
pub use phantom::{generate, simulate_annotator, AnnotatorModel, OpacityBlob, PhantomSpec};
pub use segnet::{NetConfig, SegNet, TrainConfig};
pub use split::{split_scans, ScanSplit};
pub use taxonomy::{ClassTaxonomy, LabelKind};
pub use volume::{
    apply_lung_window, class_to_group, normalize, CtVolume, LabelMask, NormStats, NormalizedSlice,
    Shape3, Window,
};
