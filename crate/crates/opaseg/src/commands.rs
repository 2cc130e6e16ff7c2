//! The six pipeline commands as library functions. Each writes its outputs and
//! one `manifest.json` into `out`.

use std::fs;
use std::path::{Path, PathBuf};

use opaseg_core::fusion::{fuse, SoftLabel};
use opaseg_core::metrics::{agreement, ProbMap};
use opaseg_core::opacity::OpacityGroups;
use opaseg_core::phantom::{generate, simulate_annotator, AnnotatorModel, PhantomSpec};
use opaseg_core::segnet::{
    class_weights_from_soft, inference_slices, train_observed, train_samples, val_samples,
    EpochRecord, SegNet, TrainData, TrainError,
};
use opaseg_core::split::split_scans;
use opaseg_core::taxonomy::{ClassTaxonomy, LabelKind};
use opaseg_core::volume::{class_to_group, CtVolume, LabelMask};
use rayon::prelude::*;

use crate::config::{default_annotator_model, derive_seed, validate_preprocess, TrainFileConfig};
use crate::error::{Error, Result};
use crate::io::{self, CheckpointHeader};
use crate::manifest::{now_ms, RunManifest};
use crate::overlay;
use crate::report::{self, Prediction, REPORT_HEADER};

pub const VOLUME_FILE: &str = "volume.ctv";
pub const TRUTH_FILE: &str = "truth.msk";
pub const SOFT_FILE: &str = "soft.slb";
pub const PROBS_FILE: &str = "probs.prb";
pub const PRED_FILE: &str = "pred.msk";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const AGREEMENT_FILE: &str = "agreement.csv";
pub const REPORT_FILE: &str = "report.csv";

/// Flags shared by every command.
#[derive(Debug, Clone)]
pub struct Common {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub opacity_groups: OpacityGroups,
}

impl Common {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Common {
            seed: None,
            config: None,
            out: out.into(),
            opacity_groups: OpacityGroups::default(),
        }
    }

    fn config_bytes(&self) -> Result<Option<Vec<u8>>> {
        self.config
            .as_ref()
            .map(|p| fs::read(p).map_err(|e| Error::io(p, e)))
            .transpose()
    }

    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }
}

fn annotator_path(dir: &Path, a: usize) -> PathBuf {
    dir.join(format!("annotator_{a:02}.msk"))
}

/// Masks as group labels, converting class masks.
fn load_group_mask(path: &Path, kind: LabelKind) -> Result<(LabelMask, [f64; 3])> {
    let (mask, spacing) = io::load_mask(path, kind)?;
    let mask = match kind {
        LabelKind::Group => mask,
        LabelKind::Class => class_to_group(&mask, &ClassTaxonomy::standard())
            .map_err(|e| Error::from(e).at(path))?,
    };
    Ok((mask, spacing))
}

pub struct PhantomArgs {
    /// Explicit phantom; random phantoms are drawn when absent.
    pub spec: Option<PathBuf>,
    pub annotator_model: Option<PathBuf>,
    pub annotators: usize,
    pub scans: usize,
    /// Shape and blob count of random phantoms.
    pub shape: [usize; 3],
    pub blobs: usize,
}

/// Writes `scan_NNN/{volume.ctv, truth.msk, annotator_KK.msk}` for each scan.
pub fn cmd_phantom(common: &Common, args: &PhantomArgs) -> Result<()> {
    let started = now_ms();
    let mut inputs = Vec::new();
    let mut config_bytes = Vec::new();
    let spec: Option<PhantomSpec> = match args.spec.as_ref().or(common.config.as_ref()) {
        Some(p) => {
            let (spec, bytes) = io::read_json::<PhantomSpec>(p)?;
            spec.validate()?;
            inputs.push(p.clone());
            config_bytes.extend(bytes);
            Some(spec)
        }
        None => None,
    };
    let model = match &args.annotator_model {
        Some(p) => {
            let (m, bytes) = io::read_json::<AnnotatorModel>(p)?;
            inputs.push(p.clone());
            config_bytes.extend(bytes);
            m
        }
        None => default_annotator_model(),
    };
    model.validate()?;
    if args.scans == 0 {
        return Err(Error::validation("--scans must be >= 1"));
    }
    if spec.is_none() {
        config_bytes.extend(format!("random {:?} blobs={}", args.shape, args.blobs).bytes());
    }
    let base = common.seed.or(spec.as_ref().map(|s| s.seed)).unwrap_or(0);
    common.create_out()?;
    (0..args.scans)
        .into_par_iter()
        .try_for_each(|i| -> Result<()> {
            let scan_spec = match &spec {
                Some(s) => PhantomSpec {
                    seed: base.wrapping_add(i as u64),
                    ..s.clone()
                },
                None => {
                    PhantomSpec::random(args.shape, args.blobs, derive_seed(base, i as u64, 0))?
                }
            };
            let (volume, truth) = generate(&scan_spec)?;
            let dir = common.out.join(format!("scan_{i:03}"));
            io::save_volume(&dir.join(VOLUME_FILE), &volume)?;
            io::save_mask(&dir.join(TRUTH_FILE), &truth, volume.spacing_mm())?;
            let mut spec_json = serde_json::to_vec_pretty(&scan_spec).expect("spec serializes");
            spec_json.push(b'\n');
            io::write_atomic(&dir.join("phantom.json"), &spec_json)?;
            for a in 0..args.annotators {
                let m = AnnotatorModel {
                    seed: derive_seed(model.seed ^ base, i as u64, a as u64 + 1),
                    ..model.clone()
                };
                let mask = simulate_annotator(&truth, &m)?;
                io::save_mask(&annotator_path(&dir, a), &mask, volume.spacing_mm())?;
            }
            Ok(())
        })?;
    RunManifest::new("phantom", &inputs, &config_bytes, Some(base), started).write(&common.out)
}

fn load_masks(paths: &[PathBuf], kind: LabelKind) -> Result<Vec<LabelMask>> {
    if paths.len() < 2 {
        return Err(Error::validation(format!(
            "need at least 2 masks, got {}",
            paths.len()
        )));
    }
    paths
        .iter()
        .map(|p| io::load_mask(p, kind).map(|(m, _)| m))
        .collect()
}

/// Fuses annotator masks into `soft.slb`.
pub fn cmd_fuse(common: &Common, masks: &[PathBuf], kind: LabelKind) -> Result<()> {
    let started = now_ms();
    let loaded: Vec<LabelMask> = masks
        .iter()
        .map(|p| io::load_mask(p, kind).map(|(m, _)| m))
        .collect::<Result<_>>()?;
    let soft = fuse(&loaded)?;
    common.create_out()?;
    io::save_soft(&common.out.join(SOFT_FILE), &soft)?;
    RunManifest::new(
        "fuse",
        masks,
        &common.config_bytes()?.unwrap_or_default(),
        common.seed,
        started,
    )
    .write(&common.out)
}

/// Pairwise and versus-average opacity IOU as a CSV matrix.
pub fn cmd_agree(common: &Common, masks: &[PathBuf], kind: LabelKind) -> Result<()> {
    let started = now_ms();
    let loaded = load_masks(masks, kind)?;
    let m = agreement(&loaded, common.opacity_groups)?;
    let mut header: Vec<&str> = vec!["annotator"];
    header.extend(m.annotator_ids.iter().map(String::as_str));
    header.push("average");
    let rows: Vec<Vec<String>> = (0..m.len())
        .map(|i| {
            let mut r = vec![m.annotator_ids[i].clone()];
            r.extend((0..m.len()).map(|j| m.get(i, j).to_string()));
            r.push(m.vs_average[i].to_string());
            r
        })
        .collect();
    common.create_out()?;
    io::write_atomic(
        &common.out.join(AGREEMENT_FILE),
        &io::csv_bytes(&header, &rows),
    )?;
    let groups = common.opacity_groups.to_string();
    RunManifest::new("agree", masks, groups.as_bytes(), common.seed, started).write(&common.out)
}

/// Scan directories under `data_dir`: subdirectories holding a volume, sorted by name.
pub fn discover_scans(data_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(data_dir).map_err(|e| Error::io(data_dir, e))?;
    let mut scans = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(data_dir, e))?;
        let path = entry.path();
        if path.join(VOLUME_FILE).is_file() {
            scans.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    scans.sort();
    if scans.is_empty() {
        return Err(Error::validation(format!(
            "{}: no scan directories containing {VOLUME_FILE}",
            data_dir.display()
        )));
    }
    Ok(scans)
}

struct Scan {
    volume: CtVolume,
    soft: SoftLabel,
    truth: Option<LabelMask>,
}

/// Training target of a scan: `soft.slb`, else fused `annotator_*.msk`, else `truth.msk`.
fn load_scan(dir: &Path, kind: LabelKind) -> Result<Scan> {
    let volume = io::load_volume(&dir.join(VOLUME_FILE))?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.is_file() {
        Some(load_group_mask(&truth_path, kind)?.0)
    } else {
        None
    };
    let soft_path = dir.join(SOFT_FILE);
    let soft = if soft_path.is_file() {
        let soft = io::load_soft(&soft_path)?;
        if soft.kind() != LabelKind::Group {
            return Err(Error::validation(format!(
                "{}: training needs a group-level soft label",
                soft_path.display()
            )));
        }
        soft
    } else {
        let annotators: Vec<PathBuf> = (0..)
            .map(|a| annotator_path(dir, a))
            .take_while(|p| p.is_file())
            .collect();
        let masks: Vec<LabelMask> = if annotators.is_empty() {
            vec![truth
                .clone()
                .ok_or_else(|| Error::validation(format!("{}: no labels", dir.display())))?]
        } else {
            annotators
                .iter()
                .map(|p| load_group_mask(p, kind).map(|(m, _)| m))
                .collect::<Result<_>>()?
        };
        fuse(&masks).map_err(|e| Error::from(e).at(dir))?
    };
    Ok(Scan {
        volume,
        soft,
        truth,
    })
}

/// Trains on the scans of `data_dir`, writing the best checkpoint, the epoch log and the split.
/// `progress` sees every finished epoch.
pub fn cmd_train(
    common: &Common,
    data_dir: &Path,
    kind: LabelKind,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    let started = now_ms();
    let (mut cfg, config_bytes) = match &common.config {
        Some(p) => io::read_json::<TrainFileConfig>(p)?,
        None => {
            let c = TrainFileConfig::default();
            let bytes = serde_json::to_vec(&c).expect("config serializes");
            (c, bytes)
        }
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.net.init_seed = seed;
    }
    cfg.validate()?;
    let scans = discover_scans(data_dir)?;
    let ids: Vec<String> = scans.iter().map(|(id, _)| id.clone()).collect();
    let split = split_scans(&ids, &cfg.test_ids, cfg.val_fraction, cfg.train.seed)?;
    let dir_of = |id: &String| {
        scans
            .iter()
            .find(|(s, _)| s == id)
            .map(|(_, p)| p.clone())
            .expect("split ids come from scans")
    };

    let prep = cfg.preprocess;
    let mut train = Vec::new();
    let mut softs = Vec::new();
    for id in &split.train {
        let dir = dir_of(id);
        let scan = load_scan(&dir, kind)?;
        train.extend(
            train_samples(&scan.volume, &scan.soft, cfg.confidence_epsilon, prep)
                .map_err(|e| Error::from(e).at(&dir))?,
        );
        softs.push(scan.soft);
    }
    let mut val = Vec::new();
    for id in &split.val {
        let dir = dir_of(id);
        let scan = load_scan(&dir, kind)?;
        let truth = match scan.truth {
            Some(t) => t,
            None => scan.soft.argmax_mask(),
        };
        val.extend(val_samples(&scan.volume, &truth, prep).map_err(|e| Error::from(e).at(&dir))?);
    }
    let (class_weights, _warnings) = class_weights_from_soft(&softs.iter().collect::<Vec<_>>());
    let data = TrainData {
        train,
        val,
        class_weights,
        opacity_groups: common.opacity_groups,
    };
    let net = SegNet::new(cfg.net)?;

    common.create_out()?;
    let split_rows: Vec<Vec<String>> = [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ]
    .iter()
    .flat_map(|(part, ids)| ids.iter().map(move |id| vec![id.clone(), part.to_string()]))
    .collect();
    io::write_atomic(
        &common.out.join(SPLIT_FILE),
        &io::csv_bytes(&["scan", "partition"], &split_rows),
    )?;
    let manifest = |started| {
        RunManifest::new(
            "train",
            &[data_dir.to_path_buf()],
            &config_bytes,
            Some(cfg.train.seed),
            started,
        )
    };
    let ckpt = common.out.join(CHECKPOINT_FILE);

    match train_observed(net, &data, &cfg.train, progress) {
        Ok(outcome) => {
            let best = outcome
                .best_epoch
                .and_then(|e| outcome.log.iter().find(|r| r.epoch == e));
            let header = CheckpointHeader {
                net: cfg.net,
                epoch: outcome.best_epoch,
                val_score: best.and_then(|r| r.val_opacity_iou),
                n_params: outcome.net.n_params(),
                preprocess: prep,
            };
            io::save_checkpoint(&ckpt, &header, &outcome.net)?;
            let rows: Vec<Vec<String>> = outcome
                .log
                .iter()
                .map(|r| {
                    vec![
                        r.epoch.to_string(),
                        r.lr.to_string(),
                        r.train_loss.to_string(),
                        r.val_opacity_iou.map(|v| v.to_string()).unwrap_or_default(),
                    ]
                })
                .collect();
            io::write_atomic(
                &common.out.join(EPOCH_LOG_FILE),
                &io::csv_bytes(&["epoch", "lr", "train_loss", "val_opacity_iou"], &rows),
            )?;
            manifest(started).write(&common.out)
        }
        Err(TrainError::NonFinite {
            epoch,
            what,
            last_good,
        }) => {
            let header = CheckpointHeader {
                net: cfg.net,
                epoch: epoch.checked_sub(1).filter(|&e| e > 0),
                val_score: None,
                n_params: last_good.n_params(),
                preprocess: prep,
            };
            io::save_checkpoint(&ckpt, &header, &last_good)?;
            manifest(started).write(&common.out)?;
            Err(Error::numerical(format!(
                "non-finite {what} in epoch {epoch}; wrote last finite parameters"
            )))
        }
        Err(e) => Err(Error::validation(e)),
    }
}

const PREDICT_BATCH: usize = 8;

/// Group probabilities, argmax mask and one PNG overlay per slice.
pub fn cmd_predict(common: &Common, checkpoint: &Path, volume_path: &Path) -> Result<()> {
    let started = now_ms();
    let ckpt = io::load_checkpoint(checkpoint)?;
    validate_preprocess(&ckpt.header.preprocess)?;
    let volume = io::load_volume(volume_path)?;
    let slices = inference_slices(&volume, ckpt.header.preprocess)?;
    let chunks: Vec<ProbMap> = slices
        .par_chunks(PREDICT_BATCH)
        .map(|chunk| ckpt.net.forward(chunk))
        .collect::<std::result::Result<_, _>>()?;
    let data: Vec<f64> = chunks
        .iter()
        .flat_map(|c| c.data().iter().copied())
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite probabilities"));
    }
    let probs = ProbMap::new(volume.shape(), ckpt.header.net.n_classes, data)?;
    let pred = LabelMask::new(volume.shape(), LabelKind::Group, "pred", probs.argmax())?;

    common.create_out()?;
    io::save_probs(&common.out.join(PROBS_FILE), &probs)?;
    io::save_mask(&common.out.join(PRED_FILE), &pred, volume.spacing_mm())?;
    let shape = volume.shape();
    (0..shape.depth).into_par_iter().try_for_each(|z| {
        let rgb = overlay::render(
            volume.slice(z),
            pred.slice(z),
            ckpt.header.preprocess.window,
        );
        io::write_atomic(
            &common.out.join(format!("overlay_{z:03}.png")),
            &overlay::encode_png(&rgb, shape.height, shape.width),
        )
    })?;
    let inputs = [checkpoint.to_path_buf(), volume_path.to_path_buf()];
    let groups = common.opacity_groups.to_string();
    RunManifest::new("predict", &inputs, groups.as_bytes(), common.seed, started).write(&common.out)
}

/// A prediction is a mask file, a probability map, or a `predict` output directory.
pub fn load_prediction(path: &Path) -> Result<Prediction> {
    if path.is_dir() {
        let probs = path.join(PROBS_FILE);
        if probs.is_file() {
            return Ok(Prediction::Probs(io::load_probs(&probs)?));
        }
        return load_prediction(&path.join(PRED_FILE));
    }
    if path.extension().is_some_and(|e| e == "prb") {
        return Ok(Prediction::Probs(io::load_probs(path)?));
    }
    Ok(Prediction::Mask(io::load_mask(path, LabelKind::Group)?.0))
}

fn scan_name(gt: &Path) -> String {
    gt.parent()
        .and_then(|p| p.file_name())
        .or_else(|| gt.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| gt.display().to_string())
}

/// Metric rows per (prediction, ground truth) pair plus the pooled `ALL` rows.
pub fn cmd_report(common: &Common, pairs: &[(PathBuf, PathBuf)], kind: LabelKind) -> Result<()> {
    let started = now_ms();
    if pairs.is_empty() {
        return Err(Error::validation(
            "report needs at least one prediction/ground-truth pair",
        ));
    }
    let mut loaded = Vec::with_capacity(pairs.len());
    for (pred, gt) in pairs {
        let p = load_prediction(pred)?;
        let (g, _) = load_group_mask(gt, kind)?;
        loaded.push((scan_name(gt), p, g));
    }
    let rows = report::evaluate(&loaded, common.opacity_groups)?;
    let fields: Vec<Vec<String>> = rows.iter().map(|r| r.fields()).collect();
    common.create_out()?;
    io::write_atomic(
        &common.out.join(REPORT_FILE),
        &io::csv_bytes(&REPORT_HEADER, &fields),
    )?;
    let inputs: Vec<PathBuf> = pairs
        .iter()
        .flat_map(|(p, g)| [p.clone(), g.clone()])
        .collect();
    let groups = common.opacity_groups.to_string();
    RunManifest::new("report", &inputs, groups.as_bytes(), common.seed, started).write(&common.out)
}
