//! Synthetic chest phantoms with exact ground truth, and simulated annotators.
//!
//! A phantom is an elliptical body containing one or two elliptical lung
//! cylinders. Ellipsoidal opacity blobs of a chosen group sit inside the lungs.
//! Simulated annotators redraw the opacity boundaries through a smooth random
//! displacement field, relabel whole regions through a confusion matrix and may
//! skip regions altogether.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::taxonomy::{LabelKind, GROUP_BACKGROUND, GROUP_LUNG, OPACITY_GROUPS, UNLABELLED};
use crate::volume::{CtVolume, LabelMask, Shape3};

/// Plausible CT range in HU.
pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(&'static str),
    #[error("blob {index} extends outside the lungs")]
    BlobOutsideLung { index: usize },
    #[error("invalid annotator model: {0}")]
    InvalidModel(&'static str),
    #[error("annotators need a group-level truth mask")]
    NotGroupMask,
    #[error("could not place {0} blobs inside the lungs")]
    Placement(usize),
}

/// An ellipsoidal opacity region in voxel coordinates (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OpacityBlob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub group: i8,
    pub intensity_hu: i16,
}

impl OpacityBlob {
    #[inline]
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let d = |i: usize, v: usize| (v as f64 - self.center[i]) / self.radii[i];
        let (a, b, c) = (d(0, z), d(1, y), d(2, x));
        a * a + b * b + c * c <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    /// Volume extent (z, y, x).
    pub shape: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    pub n_lung_ellipses: usize,
    pub blobs: Vec<OpacityBlob>,
    /// Soft tissue inside the body outline.
    pub background_hu: i16,
    /// Aerated lung intensity range; a smooth field spans it.
    pub lung_hu_range: [i16; 2],
    pub noise_std_hu: f64,
    pub seed: u64,
}

fn default_spacing() -> [f64; 3] {
    [2.5, 0.7, 0.7]
}

/// Air outside the body.
const OUTSIDE_HU: i16 = -1000;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, y: usize, x: usize) -> bool {
        let a = (y as f64 - self.cy) / self.ry;
        let b = (x as f64 - self.cx) / self.rx;
        a * a + b * b <= 1.0
    }
}

fn body_outline(h: usize, w: usize) -> Ellipse {
    let (hf, wf) = (h as f64, w as f64);
    Ellipse {
        cy: (hf - 1.0) / 2.0,
        cx: (wf - 1.0) / 2.0,
        ry: 0.46 * hf,
        rx: 0.46 * wf,
    }
}

fn lung_outlines(h: usize, w: usize, n: usize) -> Vec<Ellipse> {
    let (hf, wf) = (h as f64, w as f64);
    let cy = (hf - 1.0) / 2.0;
    let cx = (wf - 1.0) / 2.0;
    if n == 1 {
        vec![Ellipse {
            cy,
            cx,
            ry: 0.34 * hf,
            rx: 0.36 * wf,
        }]
    } else {
        let off = 0.22 * wf;
        vec![
            Ellipse {
                cy,
                cx: cx - off,
                ry: 0.34 * hf,
                rx: 0.2 * wf,
            },
            Ellipse {
                cy,
                cx: cx + off,
                ry: 0.34 * hf,
                rx: 0.2 * wf,
            },
        ]
    }
}

/// Smooth scalar field in [-1, 1] built from a few random plane waves.
#[derive(Debug, Clone)]
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
    norm: f64,
}

impl SmoothField {
    fn new<R: Rng>(
        rng: &mut R,
        n: usize,
        min_wavelength: f64,
        max_wavelength: f64,
        z_scale: f64,
    ) -> Self {
        let mut waves = Vec::with_capacity(n);
        let mut norm = 0.0;
        for _ in 0..n {
            let wavelength = rng.random_range(min_wavelength..max_wavelength);
            let angle = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / wavelength;
            let fz = rng.random_range(-1.0..1.0) * k * z_scale;
            let dir = [fz, k * libm::sin(angle), k * libm::cos(angle)];
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            norm += amp;
            waves.push((dir, phase, amp));
        }
        SmoothField { waves, norm }
    }

    #[inline]
    fn at(&self, z: f64, y: f64, x: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(d, ph, a)| a * libm::sin(d[0] * z + d[1] * y + d[2] * x + ph))
            .sum();
        s / self.norm
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.shape.contains(&0) {
            return Err(PhantomError::InvalidSpec("shape components must be >= 1"));
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return Err(PhantomError::InvalidSpec("spacing must be positive"));
        }
        if !(1..=2).contains(&self.n_lung_ellipses) {
            return Err(PhantomError::InvalidSpec("n_lung_ellipses must be 1 or 2"));
        }
        let [lo, hi] = self.lung_hu_range;
        let hu_ok = |v: i16| (HU_MIN..=HU_MAX).contains(&v);
        if lo > hi || !hu_ok(lo) || !hu_ok(hi) || !hu_ok(self.background_hu) {
            return Err(PhantomError::InvalidSpec(
                "HU values outside the CT range or inverted lung range",
            ));
        }
        if !(self.noise_std_hu >= 0.0) || !self.noise_std_hu.is_finite() {
            return Err(PhantomError::InvalidSpec("noise std must be >= 0"));
        }
        for b in &self.blobs {
            if !OPACITY_GROUPS.contains(&b.group) {
                return Err(PhantomError::InvalidSpec(
                    "blob group must be an opacity group",
                ));
            }
            if !hu_ok(b.intensity_hu) {
                return Err(PhantomError::InvalidSpec(
                    "blob intensity outside the CT range",
                ));
            }
            if b.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(PhantomError::InvalidSpec("blob radii must be positive"));
            }
        }
        Ok(())
    }

    /// A phantom with `n_blobs` randomly placed opacity blobs of random groups.
    pub fn random(shape: [usize; 3], n_blobs: usize, seed: u64) -> Result<Self, PhantomError> {
        let [d, h, w] = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n_lung_ellipses = 2;
        let lungs = lung_outlines(h, w, n_lung_ellipses);
        let mut blobs = Vec::with_capacity(n_blobs);
        let mut attempts = 0;
        while blobs.len() < n_blobs {
            attempts += 1;
            if attempts > 1000 * (n_blobs + 1) {
                return Err(PhantomError::Placement(n_blobs));
            }
            let lung = lungs[rng.random_range(0..lungs.len())];
            let max_r = 0.7 * lung.rx.min(lung.ry);
            let min_r = (0.4 * max_r).max(3.0).min(max_r * 0.99);
            let ry = rng.random_range(min_r..max_r);
            let rx = rng.random_range(min_r..max_r);
            let rz = rng.random_range(1.0..2.0) * (d as f64).max(2.0);
            let cz = rng.random_range(0.0..d as f64) - 0.5;
            let cy = lung.cy + rng.random_range(-1.0..1.0) * (lung.ry - ry);
            let cx = lung.cx + rng.random_range(-1.0..1.0) * (lung.rx - rx);
            let group = OPACITY_GROUPS[rng.random_range(0..OPACITY_GROUPS.len())];
            let intensity_hu = match group {
                2 => rng.random_range(-600..-450),
                3 => rng.random_range(-430..-300),
                _ => rng.random_range(-20..100),
            };
            let blob = OpacityBlob {
                center: [cz.max(0.0), cy, cx],
                radii: [rz, ry, rx],
                group,
                intensity_hu,
            };
            if blob_inside(&blob, shape, &lungs) {
                blobs.push(blob);
            }
        }
        Ok(PhantomSpec {
            shape,
            spacing_mm: default_spacing(),
            n_lung_ellipses,
            blobs,
            background_hu: 40,
            lung_hu_range: [-850, -650],
            noise_std_hu: 20.0,
            seed,
        })
    }
}

fn inside_lungs(lungs: &[Ellipse], y: usize, x: usize) -> bool {
    lungs.iter().any(|l| l.contains(y, x))
}

fn blob_inside(blob: &OpacityBlob, shape: [usize; 3], lungs: &[Ellipse]) -> bool {
    let [d, h, w] = shape;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if blob.contains(z, y, x) && !inside_lungs(lungs, y, x) {
                    return false;
                }
            }
        }
    }
    true
}

/// Renders the phantom volume and its exact group-level truth.
pub fn generate(spec: &PhantomSpec) -> Result<(CtVolume, LabelMask), PhantomError> {
    spec.validate()?;
    let [d, h, w] = spec.shape;
    let shape = Shape3::new(d, h, w);
    let body = body_outline(h, w);
    let lungs = lung_outlines(h, w, spec.n_lung_ellipses);
    for (index, blob) in spec.blobs.iter().enumerate() {
        if !blob_inside(blob, spec.shape, &lungs) {
            return Err(PhantomError::BlobOutsideLung { index });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let texture = SmoothField::new(&mut rng, 4, 12.0, 40.0, 0.3);
    let noise =
        Normal::new(0.0, spec.noise_std_hu).map_err(|_| PhantomError::InvalidSpec("noise std"))?;
    let [lo, hi] = spec.lung_hu_range;
    let (lung_mid, lung_half) = ((lo as f64 + hi as f64) / 2.0, (hi as f64 - lo as f64) / 2.0);
    let mut labels = vec![GROUP_BACKGROUND; shape.len()];
    let mut voxels = vec![0i16; shape.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = shape.index(z, y, x);
                let (label, base) =
                    if let Some(b) = spec.blobs.iter().rev().find(|b| b.contains(z, y, x)) {
                        (b.group, b.intensity_hu as f64)
                    } else if inside_lungs(&lungs, y, x) {
                        (
                            GROUP_LUNG,
                            lung_mid + lung_half * texture.at(z as f64, y as f64, x as f64),
                        )
                    } else if body.contains(y, x) {
                        (GROUP_BACKGROUND, spec.background_hu as f64)
                    } else {
                        (GROUP_BACKGROUND, OUTSIDE_HU as f64)
                    };
                let value = if spec.noise_std_hu > 0.0 {
                    base + noise.sample(&mut rng)
                } else {
                    base
                };
                labels[i] = label;
                voxels[i] = libm::round(value).clamp(HU_MIN as f64, HU_MAX as f64) as i16;
            }
        }
    }
    let volume = CtVolume::new(shape, spec.spacing_mm, voxels)
        .map_err(|_| PhantomError::InvalidSpec("spacing"))?;
    let mask = LabelMask::new(shape, LabelKind::Group, "truth", labels)
        .expect("phantom labels are valid groups");
    Ok((volume, mask))
}

/// Noise model of one simulated annotator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnnotatorModel {
    /// Maximum boundary displacement in pixels.
    pub boundary_jitter_px: f64,
    /// Row-stochastic confusion over opacity groups 2, 3, 4 (row = true group).
    pub class_confusion: [[f64; 3]; 3],
    /// Probability of skipping an entire opacity region.
    pub omission_rate: f64,
    pub seed: u64,
}

impl AnnotatorModel {
    pub fn noiseless(seed: u64) -> Self {
        AnnotatorModel {
            boundary_jitter_px: 0.0,
            class_confusion: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            omission_rate: 0.0,
            seed,
        }
    }

    /// Keeps the true group with probability `1 - p`, otherwise picks one of the
    /// other two opacity groups uniformly.
    pub fn with_confusion(mut self, p: f64) -> Self {
        for (i, row) in self.class_confusion.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 1.0 - p } else { p / 2.0 };
            }
        }
        self
    }

    pub fn with_jitter(mut self, px: f64) -> Self {
        self.boundary_jitter_px = px;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.boundary_jitter_px >= 0.0) || !self.boundary_jitter_px.is_finite() {
            return Err(PhantomError::InvalidModel("jitter must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.omission_rate) {
            return Err(PhantomError::InvalidModel(
                "omission rate must lie in [0, 1]",
            ));
        }
        for row in &self.class_confusion {
            if row.iter().any(|v| !(0.0..=1.0).contains(v))
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(PhantomError::InvalidModel(
                    "confusion rows must be probability vectors",
                ));
            }
        }
        Ok(())
    }
}

fn is_opacity(g: i8) -> bool {
    OPACITY_GROUPS.contains(&g)
}

/// Connected components (6-connectivity) of same-group opacity voxels.
/// Returns the component index per voxel (`usize::MAX` elsewhere) and the group of each component.
fn opacity_components(shape: Shape3, labels: &[i8]) -> (Vec<usize>, Vec<i8>) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut groups = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX || !is_opacity(labels[start]) {
            continue;
        }
        let id = groups.len();
        let g = labels[start];
        groups.push(g);
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let x = i % shape.width;
            let y = (i / shape.width) % shape.height;
            let z = i / shape.slice_len();
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == g {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < shape.width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - shape.width);
            }
            if y + 1 < shape.height {
                visit(i + shape.width);
            }
            if z > 0 {
                visit(i - shape.slice_len());
            }
            if z + 1 < shape.depth {
                visit(i + shape.slice_len());
            }
        }
    }
    (comp, groups)
}

/// Draws one annotator's labelling of a group-level truth mask.
pub fn simulate_annotator(
    truth: &LabelMask,
    model: &AnnotatorModel,
) -> Result<LabelMask, PhantomError> {
    model.validate()?;
    if truth.kind() != LabelKind::Group {
        return Err(PhantomError::NotGroupMask);
    }
    let shape = truth.shape();
    let labels = truth.labels();
    let (comp, comp_groups) = opacity_components(shape, labels);
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let relabel: Vec<Option<i8>> = comp_groups
        .iter()
        .map(|&g| {
            let omitted = rng.random::<f64>() < model.omission_rate;
            let row = &model.class_confusion[(g - OPACITY_GROUPS[0]) as usize];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = OPACITY_GROUPS[2];
            for (j, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = OPACITY_GROUPS[j];
                    break;
                }
            }
            (!omitted).then_some(pick)
        })
        .collect();
    let field_y = SmoothField::new(&mut rng, 8, 10.0, 24.0, 0.5);
    let field_x = SmoothField::new(&mut rng, 8, 10.0, 24.0, 0.5);
    let amp = model.boundary_jitter_px;
    let mut out = labels.to_vec();
    for z in 0..shape.depth {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let i = shape.index(z, y, x);
                let l = labels[i];
                if l != GROUP_LUNG && !is_opacity(l) {
                    continue;
                }
                let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                let sy = libm::round(yf + amp * field_y.at(zf, yf, xf))
                    .clamp(0.0, (shape.height - 1) as f64);
                let sx = libm::round(xf + amp * field_x.at(zf, yf, xf))
                    .clamp(0.0, (shape.width - 1) as f64);
                let j = shape.index(z, sy as usize, sx as usize);
                out[i] = match comp[j] {
                    c if c != usize::MAX => relabel[c].unwrap_or(GROUP_LUNG),
                    _ => GROUP_LUNG,
                };
            }
        }
    }
    debug_assert!(out
        .iter()
        .all(|&l| l != UNLABELLED || labels.contains(&UNLABELLED)));
    LabelMask::with_labelled_slices(
        shape,
        LabelKind::Group,
        truth.annotator_id(),
        out,
        truth.labelled_slices().clone(),
    )
    .map_err(|_| PhantomError::NotGroupMask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(blobs: Vec<OpacityBlob>) -> PhantomSpec {
        PhantomSpec {
            shape: [3, 64, 64],
            spacing_mm: default_spacing(),
            n_lung_ellipses: 2,
            blobs,
            background_hu: 40,
            lung_hu_range: [-850, -650],
            noise_std_hu: 15.0,
            seed: 1,
        }
    }

    #[test]
    fn zero_blobs_have_no_opacity() {
        let (vol, truth) = generate(&spec_with(vec![])).unwrap();
        assert!(truth.labels().iter().all(|&l| l == 0 || l == 1));
        assert!(vol.voxels().iter().all(|&v| (HU_MIN..=HU_MAX).contains(&v)));
    }

    #[test]
    fn same_seed_same_volume() {
        let s = PhantomSpec::random([2, 32, 32], 2, 9).unwrap();
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }

    #[test]
    fn blob_outside_lung_is_rejected() {
        let blob = OpacityBlob {
            center: [1.0, 32.0, 2.0],
            radii: [2.0, 4.0, 4.0],
            group: 2,
            intensity_hu: -500,
        };
        assert_eq!(
            generate(&spec_with(vec![blob])),
            Err(PhantomError::BlobOutsideLung { index: 0 })
        );
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec_with(vec![]);
        s.n_lung_ellipses = 3;
        assert!(generate(&s).is_err());
        let mut s = spec_with(vec![]);
        s.lung_hu_range = [-650, -850];
        assert!(generate(&s).is_err());
        let blob = OpacityBlob {
            center: [1.0, 31.5, 17.4],
            radii: [2.0, 3.0, 3.0],
            group: 1,
            intensity_hu: -500,
        };
        assert!(generate(&spec_with(vec![blob])).is_err());
    }

    #[test]
    fn noiseless_annotator_reproduces_truth() {
        let s = PhantomSpec::random([3, 64, 64], 3, 4).unwrap();
        let (_, truth) = generate(&s).unwrap();
        let a = simulate_annotator(&truth, &AnnotatorModel::noiseless(77)).unwrap();
        assert_eq!(a.labels(), truth.labels());
    }

    #[test]
    fn full_omission_removes_opacity() {
        let s = PhantomSpec::random([2, 64, 64], 3, 5).unwrap();
        let (_, truth) = generate(&s).unwrap();
        let model = AnnotatorModel {
            omission_rate: 1.0,
            ..AnnotatorModel::noiseless(3)
        };
        let a = simulate_annotator(&truth, &model).unwrap();
        assert!(a.labels().iter().all(|&l| !is_opacity(l)));
        // lung and background are untouched apart from where opacity used to be
        for (t, o) in truth.labels().iter().zip(a.labels()) {
            if *t == GROUP_BACKGROUND {
                assert_eq!(*o, GROUP_BACKGROUND);
            }
        }
    }

    #[test]
    fn model_validation() {
        let mut m = AnnotatorModel::noiseless(0);
        m.class_confusion[0] = [0.5, 0.4, 0.0];
        assert!(m.validate().is_err());
        assert!(AnnotatorModel::noiseless(0)
            .with_jitter(-1.0)
            .validate()
            .is_err());
        assert!(AnnotatorModel::noiseless(0)
            .with_confusion(0.2)
            .validate()
            .is_ok());
    }

    #[test]
    fn components_split_by_group() {
        let shape = Shape3::new(1, 1, 5);
        let (comp, groups) = opacity_components(shape, &[2, 2, 3, 1, 2]);
        assert_eq!(groups, vec![2, 3, 2]);
        assert_eq!(comp, vec![0, 0, 1, usize::MAX, 2]);
    }
}
