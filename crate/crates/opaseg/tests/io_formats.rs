use std::fs;

use opaseg::io::{self, CheckpointHeader};
use opaseg::ErrorKind;
use opaseg_core::fusion::fuse;
use opaseg_core::metrics::ProbMap;
use opaseg_core::segnet::{NetConfig, Preprocess, SegNet};
use opaseg_core::taxonomy::LabelKind;
use opaseg_core::volume::{CtVolume, LabelMask, Shape3};

fn volume() -> CtVolume {
    let shape = Shape3::new(2, 4, 4);
    CtVolume::new(
        shape,
        [2.5, 0.7, 0.7],
        (0..32).map(|i| i * 97 - 1024).collect(),
    )
    .unwrap()
}

#[test]
fn volume_round_trips_and_payload_is_little_endian_i16() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ctv");
    io::save_volume(&path, &volume()).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 64);
    assert_eq!(&fs::read(&path).unwrap()[..2], &(-1024i16).to_le_bytes());
    assert_eq!(io::load_volume(&path).unwrap(), volume());
}

#[test]
fn truncated_volume_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.ctv");
    io::save_volume(&path, &volume()).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..60]).unwrap();
    assert_eq!(
        io::load_volume(&path).unwrap_err().kind,
        ErrorKind::Validation
    );
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = io::load_volume(&dir.path().join("absent.ctv")).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Io);
    assert_eq!(err.kind.exit_code(), 2);
}

#[test]
fn masks_keep_unlabelled_voxels_and_take_their_id_from_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reader_7.msk");
    let labels: Vec<i8> = (0..32).map(|i| (i % 6) as i8 - 1).collect();
    let mask = LabelMask::new(Shape3::new(2, 4, 4), LabelKind::Group, "x", labels.clone()).unwrap();
    io::save_mask(&path, &mask, [1.0, 0.5, 0.5]).unwrap();
    let (back, spacing) = io::load_mask(&path, LabelKind::Group).unwrap();
    assert_eq!(back.labels(), &labels[..]);
    assert_eq!(back.annotator_id(), "reader_7");
    assert_eq!(spacing, [1.0, 0.5, 0.5]);
}

#[test]
fn class_labels_do_not_load_as_groups() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.msk");
    let mask = LabelMask::new(
        Shape3::new(1, 2, 2),
        LabelKind::Class,
        "c",
        vec![0, 3, 9, 10],
    )
    .unwrap();
    io::save_mask(&path, &mask, [1.0; 3]).unwrap();
    assert_eq!(
        io::load_mask(&path, LabelKind::Group).unwrap_err().kind,
        ErrorKind::Validation
    );
    assert_eq!(
        io::load_mask(&path, LabelKind::Class).unwrap().0.labels(),
        &[0, 3, 9, 10]
    );
}

#[test]
fn soft_labels_round_trip_at_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.slb");
    let shape = Shape3::new(2, 4, 4);
    let masks: Vec<LabelMask> = (0..3)
        .map(|a| {
            let labels = (0..32)
                .map(|i| {
                    if (i + a) % 7 == 0 {
                        -1
                    } else {
                        ((i * (a + 1)) % 5) as i8
                    }
                })
                .collect();
            LabelMask::new(shape, LabelKind::Group, format!("a{a}"), labels).unwrap()
        })
        .collect();
    let soft = fuse(&masks).unwrap();
    io::save_soft(&path, &soft).unwrap();
    let back = io::load_soft(&path).unwrap();
    assert_eq!(back.kind(), LabelKind::Group);
    assert_eq!(back.n_annotators(), 3);
    assert_eq!(back.support(), soft.support());
    for (a, b) in soft
        .mean()
        .iter()
        .zip(back.mean())
        .chain(soft.std().iter().zip(back.std()))
    {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn probability_maps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.prb");
    let shape = Shape3::new(1, 2, 2);
    let data: Vec<f64> = (0..20)
        .map(|i| [0.5, 0.25, 0.125, 0.0625, 0.0625][i / 4])
        .collect();
    let probs = ProbMap::new(shape, 5, data).unwrap();
    io::save_probs(&path, &probs).unwrap();
    assert_eq!(io::load_probs(&path).unwrap(), probs);
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let net = SegNet::new(NetConfig {
        init_seed: 3,
        ..NetConfig::default()
    })
    .unwrap();
    let header = CheckpointHeader {
        net: *net.config(),
        epoch: Some(4),
        val_score: Some(0.5),
        n_params: net.n_params(),
        preprocess: Preprocess::default(),
    };
    io::save_checkpoint(&path, &header, &net).unwrap();
    let back = io::load_checkpoint(&path).unwrap();
    assert_eq!(back.header, header);
    assert_eq!(
        back.net
            .params()
            .iter()
            .map(|p| p.to_bits())
            .collect::<Vec<_>>(),
        net.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>()
    );

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(
        io::load_checkpoint(&path).unwrap_err().kind,
        ErrorKind::Validation
    );
}

#[test]
fn csv_quotes_fields_and_ends_lines_with_crlf() {
    let rows = vec![vec!["a,b".to_string(), "say \"hi\"".to_string()]];
    let bytes = io::csv_bytes(&["x", "y"], &rows);
    assert_eq!(
        String::from_utf8(bytes).unwrap(),
        "x,y\r\n\"a,b\",\"say \"\"hi\"\"\"\r\n"
    );
}
