//! On-disk formats. Every payload is a flat little-endian file next to a
//! `<payload>.json` sidecar describing it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use opaseg_core::fusion::SoftLabel;
use opaseg_core::metrics::ProbMap;
use opaseg_core::segnet::{NetConfig, Preprocess, SegNet};
use opaseg_core::taxonomy::LabelKind;
use opaseg_core::volume::{CtVolume, LabelMask, Shape3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // Temp files default to 0600; outputs are ordinary files.
    #[cfg(unix)]
    let mut tmp = {
        use std::os::unix::fs::PermissionsExt;
        tempfile::Builder::new()
            .permissions(fs::Permissions::from_mode(0o644))
            .tempfile_in(dir)
    }
    .map_err(|e| Error::io(dir, e))?;
    #[cfg(not(unix))]
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let side = sidecar_path(path);
    let bytes = fs::read(&side).map_err(|e| Error::io(&side, format!("missing header: {e}")))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::validation(format!("{}: bad header: {e}", side.display())))
}

fn write_sidecar<T: Serialize>(path: &Path, header: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(header).expect("headers serialize");
    bytes.push(b'\n');
    write_atomic(&sidecar_path(path), &bytes)
}

fn check_len(path: &Path, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::validation(format!(
            "{}: payload has {got} bytes, header implies {expected}",
            path.display()
        )));
    }
    Ok(())
}

/// Sidecar of `.ctv` and `.msk` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub kind: String,
}

const CT_DTYPE: &str = "i16";
const MASK_DTYPE: &str = "u8+offset";

fn expect_header(path: &Path, h: &VolumeHeader, dtype: &str, kind: &str) -> Result<()> {
    if h.dtype != dtype || h.kind != kind {
        return Err(Error::validation(format!(
            "{}: expected dtype {dtype:?} kind {kind:?}, header says {:?} {:?}",
            path.display(),
            h.dtype,
            h.kind
        )));
    }
    Ok(())
}

pub fn save_volume(path: &Path, volume: &CtVolume) -> Result<()> {
    let bytes: Vec<u8> = volume
        .voxels()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    write_atomic(path, &bytes)?;
    write_sidecar(
        path,
        &VolumeHeader {
            shape: volume.shape().as_array(),
            spacing_mm: volume.spacing_mm(),
            dtype: CT_DTYPE.into(),
            kind: "ct".into(),
        },
    )
}

pub fn load_volume(path: &Path) -> Result<CtVolume> {
    let h: VolumeHeader = read_sidecar(path)?;
    expect_header(path, &h, CT_DTYPE, "ct")?;
    let bytes = read(path)?;
    let shape = Shape3::from(h.shape);
    check_len(path, bytes.len(), shape.len() * 2)?;
    let voxels = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    CtVolume::new(shape, h.spacing_mm, voxels).map_err(|e| Error::from(e).at(path))
}

/// Mask IDs are stored shifted by one so that unlabelled (-1) becomes 0.
pub fn save_mask(path: &Path, mask: &LabelMask, spacing_mm: [f64; 3]) -> Result<()> {
    let bytes: Vec<u8> = mask
        .labels()
        .iter()
        .map(|&l| (l as i16 + 1) as u8)
        .collect();
    write_atomic(path, &bytes)?;
    write_sidecar(
        path,
        &VolumeHeader {
            shape: mask.shape().as_array(),
            spacing_mm,
            dtype: MASK_DTYPE.into(),
            kind: "mask".into(),
        },
    )
}

/// Annotator ID defaults to the file stem.
pub fn load_mask(path: &Path, kind: LabelKind) -> Result<(LabelMask, [f64; 3])> {
    let h: VolumeHeader = read_sidecar(path)?;
    expect_header(path, &h, MASK_DTYPE, "mask")?;
    let bytes = read(path)?;
    let shape = Shape3::from(h.shape);
    check_len(path, bytes.len(), shape.len())?;
    let labels: Vec<i8> = bytes
        .iter()
        .enumerate()
        .map(|(index, &b)| {
            i8::try_from(b as i16 - 1).map_err(|_| {
                Error::validation(format!(
                    "{}: byte {b} at voxel {index} is not a label",
                    path.display()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mask = LabelMask::new(shape, kind, id, labels).map_err(|e| Error::from(e).at(path))?;
    Ok((mask, h.spacing_mm))
}

/// Sidecar of soft-label files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftHeader {
    pub classes: Vec<i8>,
    pub n_annotators: usize,
    pub shape: [usize; 3],
    /// Annotator support per voxel, appended after the float planes.
    pub support_dtype: String,
}

fn label_ids(kind: LabelKind) -> Vec<i8> {
    (0..kind.n_labels() as i8).collect()
}

fn kind_of_ids(ids: &[i8]) -> Option<LabelKind> {
    [LabelKind::Group, LabelKind::Class]
        .into_iter()
        .find(|&k| ids == label_ids(k).as_slice())
}

/// Payload: per slice, mean then std as f32 `labels x height x width` planes;
/// then one u16 support value per voxel.
pub fn save_soft(path: &Path, soft: &SoftLabel) -> Result<()> {
    let shape = soft.shape();
    let c = soft.n_labels();
    let per_slice = c * shape.slice_len();
    let mut bytes = Vec::with_capacity(shape.len() * (8 * c + 2));
    for z in 0..shape.depth {
        let planes = [
            &soft.mean()[z * per_slice..(z + 1) * per_slice],
            &soft.std()[z * per_slice..(z + 1) * per_slice],
        ];
        for plane in planes {
            bytes.extend(plane.iter().flat_map(|&v| (v as f32).to_le_bytes()));
        }
    }
    bytes.extend(soft.support().iter().flat_map(|s| s.to_le_bytes()));
    write_atomic(path, &bytes)?;
    write_sidecar(
        path,
        &SoftHeader {
            classes: label_ids(soft.kind()),
            n_annotators: soft.n_annotators(),
            shape: shape.as_array(),
            support_dtype: "u16".into(),
        },
    )
}

pub fn load_soft(path: &Path) -> Result<SoftLabel> {
    let h: SoftHeader = read_sidecar(path)?;
    let kind = kind_of_ids(&h.classes).ok_or_else(|| {
        Error::validation(format!(
            "{}: unsupported class list {:?}",
            path.display(),
            h.classes
        ))
    })?;
    if h.support_dtype != "u16" {
        return Err(Error::validation(format!(
            "{}: unsupported support dtype {:?}",
            path.display(),
            h.support_dtype
        )));
    }
    let shape = Shape3::from(h.shape);
    let c = kind.n_labels();
    let per_slice = c * shape.slice_len();
    let bytes = read(path)?;
    check_len(path, bytes.len(), shape.len() * (8 * c + 2))?;
    let floats: Vec<f64> = bytes[..8 * c * shape.len()]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut mean = Vec::with_capacity(c * shape.len());
    let mut std = Vec::with_capacity(c * shape.len());
    for z in 0..shape.depth {
        let base = 2 * z * per_slice;
        mean.extend_from_slice(&floats[base..base + per_slice]);
        std.extend_from_slice(&floats[base + per_slice..base + 2 * per_slice]);
    }
    let support = bytes[8 * c * shape.len()..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    SoftLabel::from_parts(shape, kind, h.n_annotators, support, mean, std)
        .map_err(|e| Error::from(e).at(path))
}

/// Sidecar of probability maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbHeader {
    pub classes: Vec<i8>,
    pub shape: [usize; 3],
    pub dtype: String,
}

/// Payload: per slice, f32 `classes x height x width` planes.
pub fn save_probs(path: &Path, probs: &ProbMap) -> Result<()> {
    let bytes: Vec<u8> = probs
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    write_atomic(path, &bytes)?;
    write_sidecar(
        path,
        &ProbHeader {
            classes: (0..probs.n_classes() as i8).collect(),
            shape: probs.shape().as_array(),
            dtype: "f32".into(),
        },
    )
}

pub fn load_probs(path: &Path) -> Result<ProbMap> {
    let h: ProbHeader = read_sidecar(path)?;
    if h.dtype != "f32" {
        return Err(Error::validation(format!(
            "{}: unsupported dtype {:?}",
            path.display(),
            h.dtype
        )));
    }
    let shape = Shape3::from(h.shape);
    let bytes = read(path)?;
    check_len(path, bytes.len(), 4 * h.classes.len() * shape.len())?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ProbMap::new(shape, h.classes.len(), data).map_err(|e| Error::from(e).at(path))
}

/// First line of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    /// Epoch the parameters come from; absent for an untrained net.
    pub epoch: Option<usize>,
    pub val_score: Option<f64>,
    pub n_params: usize,
    pub preprocess: Preprocess,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub net: SegNet,
}

/// One line of JSON, a newline, then the parameters as f64 little-endian.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, net: &SegNet) -> Result<()> {
    let mut bytes = serde_json::to_vec(header).expect("headers serialize");
    bytes.push(b'\n');
    bytes.extend(net.params().iter().flat_map(|p| p.to_le_bytes()));
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read(path)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| {
        Error::validation(format!("{}: missing checkpoint header", path.display()))
    })?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| {
        Error::validation(format!("{}: bad checkpoint header: {e}", path.display()))
    })?;
    let payload = &bytes[nl + 1..];
    check_len(path, payload.len(), header.n_params * 8)?;
    let params = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let net = SegNet::from_params(header.net, params).map_err(|e| Error::from(e).at(path))?;
    Ok(Checkpoint { header, net })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Vec<u8>)> {
    let bytes = read(path)?;
    let value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    Ok((value, bytes))
}

/// Serializes rows as RFC 4180 CSV (CRLF line endings).
pub fn csv_bytes<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r.as_ref()).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}
