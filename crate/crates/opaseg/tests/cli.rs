use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn opaseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opaseg"))
        .args(args)
        .env("OPASEG_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = opaseg(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

fn annotators(scan: &Path, n: usize) -> Vec<PathBuf> {
    (0..n)
        .map(|a| scan.join(format!("annotator_{a:02}.msk")))
        .collect()
}

#[test]
fn report_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "phantom",
        "--scans",
        "1",
        "--annotators",
        "0",
        "--shape",
        "2,64,64",
        "--seed",
        "5",
        "--out",
        s(&data),
    ]);
    let truth = data.join("scan_000/truth.msk");
    let out = dir.path().join("rep");
    ok(&["report", s(&truth), s(&truth), "--out", s(&out)]);
    let table = rows(&out.join("report.csv"));
    assert_eq!(table[0], ["scan", "metric", "group", "value"]);
    for r in &table[1..] {
        match r[1].as_str() {
            "iou" | "opacity_iou" | "relative_volume" => {
                assert!(r[3].is_empty() || r[3] == "1", "{r:?}")
            }
            _ => {}
        }
    }
    let opacity: Vec<_> = table
        .iter()
        .filter(|r| r[1] == "opacity_iou" || r[1] == "relative_volume")
        .collect();
    assert_eq!(opacity.len(), 4);
    assert!(opacity.iter().all(|r| r[3] == "1"));
    let wal: Vec<_> = table
        .iter()
        .filter(|r| r[0] == "scan_000" && r[1].starts_with("percent_wal"))
        .map(|r| &r[3])
        .collect();
    assert_eq!(wal[0], wal[1]);
}

#[test]
fn identical_masks_agree_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "phantom",
        "--scans",
        "1",
        "--annotators",
        "0",
        "--shape",
        "2,64,64",
        "--out",
        s(&data),
    ]);
    let truth = data.join("scan_000/truth.msk");
    let copy = dir.path().join("copy.msk");
    fs::copy(&truth, &copy).unwrap();
    fs::copy(
        data.join("scan_000/truth.msk.json"),
        dir.path().join("copy.msk.json"),
    )
    .unwrap();
    let out = dir.path().join("agree");
    ok(&["agree", s(&truth), s(&copy), "--out", s(&out)]);
    let table = rows(&out.join("agreement.csv"));
    assert_eq!(table[0], ["annotator", "truth", "copy", "average"]);
    for r in &table[1..] {
        assert_eq!(&r[1..], ["1", "1", "1"]);
    }
}

#[test]
fn fused_annotators_are_closer_to_the_average_than_to_peers() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "phantom",
        "--scans",
        "3",
        "--annotators",
        "12",
        "--shape",
        "2,64,64",
        "--seed",
        "9",
        "--out",
        s(&data),
    ]);
    let (mut hits, mut total) = (0, 0);
    for scan in 0..3 {
        let scan = data.join(format!("scan_{scan:03}"));
        let masks = annotators(&scan, 12);
        let mut args = vec!["fuse"];
        args.extend(masks.iter().map(|p| s(p)));
        args.extend(["--out", s(&scan)]);
        ok(&args);
        assert!(scan.join("soft.slb").is_file());

        let out = scan.join("agree");
        args[0] = "agree";
        *args.last_mut().unwrap() = s(&out);
        ok(&args);
        for r in &rows(&out.join("agreement.csv"))[1..] {
            let vals: Vec<f64> = r[1..].iter().map(|v| v.parse().unwrap()).collect();
            let (pairs, avg) = vals.split_at(12);
            let peer = pairs
                .iter()
                .filter(|&&v| v < 1.0)
                .cloned()
                .fold(0.0, f64::max);
            hits += (avg[0] > peer) as usize;
            total += 1;
        }
    }
    assert!(hits * 10 >= total * 9, "{hits}/{total}");
}

#[test]
fn pipeline_closes_on_a_sixteen_slice_phantom() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "phantom",
        "--scans",
        "3",
        "--annotators",
        "4",
        "--shape",
        "16,64,64",
        "--seed",
        "1",
        "--out",
        s(&data),
    ]);
    for scan in 0..3 {
        let scan = data.join(format!("scan_{scan:03}"));
        let masks = annotators(&scan, 4);
        let mut args = vec!["fuse"];
        args.extend(masks.iter().map(|p| s(p)));
        args.extend(["--out", s(&scan)]);
        ok(&args);
    }
    let cfg = dir.path().join("train.json");
    fs::write(
        &cfg,
        r#"{"epochs": 2, "batch_size": 8, "val_fraction": 0.34}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let train = ok(&["train", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(
        String::from_utf8_lossy(&train.stderr)
            .lines()
            .filter(|l| l.starts_with("epoch "))
            .count(),
        2
    );
    for f in ["model.ckpt", "epochs.csv", "split.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let volume = data.join("scan_002/volume.ctv");
    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        s(&volume),
        "--out",
        s(&pred),
    ]);
    assert!(pred.join("probs.prb").is_file() && pred.join("pred.msk").is_file());
    assert!(pred.join("overlay_015.png").is_file());
    let rep = dir.path().join("rep");
    ok(&[
        "report",
        s(&pred),
        s(&data.join("scan_002/truth.msk")),
        "--out",
        s(&rep),
    ]);
    assert_eq!(rows(&rep.join("report.csv")).len(), 1 + 2 * 9);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(rep.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "report");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(t0.elapsed().as_secs() < 600);
}

#[test]
fn phantom_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "phantom",
            "--scans",
            "2",
            "--annotators",
            "2",
            "--shape",
            "2,32,32",
            "--seed",
            "3",
            "--out",
            s(out),
        ]);
    }
    for f in [
        "volume.ctv",
        "truth.msk",
        "annotator_01.msk",
        "phantom.json",
    ] {
        assert_eq!(
            fs::read(a.join("scan_001").join(f)).unwrap(),
            fs::read(b.join("scan_001").join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    ok(&[
        "phantom",
        "--scans",
        "2",
        "--annotators",
        "2",
        "--shape",
        "2,32,32",
        "--seed",
        "4",
        "--out",
        s(&c),
    ]);
    assert_ne!(
        fs::read(a.join("scan_001/truth.msk")).unwrap(),
        fs::read(c.join("scan_001/truth.msk")).unwrap()
    );
}

fn diagnostic(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.lines().count(), 1, "{err}");
    err
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = opaseg(&[
        "fuse",
        "missing_a.msk",
        "missing_b.msk",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(diagnostic(&out).starts_with("error kind=io msg="));

    let out = opaseg(&[
        "agree",
        "a.msk",
        "--opacity-groups",
        "0,1,2,3,4",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(diagnostic(&out).starts_with("error kind=validation msg="));

    let out = opaseg(&["phantom", "--shape", "4,64", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    diagnostic(&out);

    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"shape": [0, 64, 64]}"#).unwrap();
    let out = opaseg(&["phantom", "--config", s(&spec), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let out = Command::new(env!("CARGO_BIN_EXE_opaseg"))
        .args(["phantom", "--out", s(dir.path())])
        .env("OPASEG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_with_non_finite_input_exits_numerical_and_keeps_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "phantom",
        "--scans",
        "3",
        "--annotators",
        "2",
        "--shape",
        "2,32,32",
        "--out",
        s(&data),
    ]);
    // The first Adam step at this rate overflows the weights.
    let cfg = dir.path().join("train.json");
    fs::write(
        &cfg,
        r#"{"epochs": 3, "batch_size": 2, "initial_lr": 1e300, "val_fraction": 0.34}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = opaseg(&["train", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let last = String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap()
        .to_string();
    assert!(last.starts_with("error kind=numerical msg="), "{last}");
    assert!(run.join("model.ckpt").is_file());
}
