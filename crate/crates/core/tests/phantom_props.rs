use opaseg_core::fusion::fuse;
use opaseg_core::metrics::{agreement, group_ious, percent_wal};
use opaseg_core::opacity::OpacityGroups;
use opaseg_core::phantom::{
    generate, simulate_annotator, AnnotatorModel, OpacityBlob, PhantomSpec,
};
use opaseg_core::volume::LabelMask;

fn is_opacity(l: i8) -> bool {
    (2..=4).contains(&l)
}

/// Brute-force opacity IOU over two group masks.
fn oracle_iou(a: &[i8], b: &[i8]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        let (p, q) = (is_opacity(x), is_opacity(y));
        inter += (p && q) as u64;
        union += (p || q) as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn single_blob(radius: f64, group: i8, seed: u64) -> PhantomSpec {
    // centred in the left lung
    PhantomSpec {
        shape: [1, 64, 64],
        spacing_mm: [2.5, 0.7, 0.7],
        n_lung_ellipses: 2,
        blobs: vec![OpacityBlob {
            center: [0.0, 31.5, 17.42],
            radii: [4.0, radius, radius],
            group,
            intensity_hu: -500,
        }],
        background_hu: 40,
        lung_hu_range: [-850, -650],
        noise_std_hu: 20.0,
        seed,
    }
}

fn annotators(truth: &LabelMask, n: u64, jitter: f64, confusion: f64, seed: u64) -> Vec<LabelMask> {
    (0..n)
        .map(|a| {
            let model = AnnotatorModel::noiseless(seed * 1000 + a)
                .with_jitter(jitter)
                .with_confusion(confusion);
            let mut m = simulate_annotator(truth, &model).unwrap();
            m.set_annotator_id(format!("a{a:02}"));
            m
        })
        .collect()
}

#[test]
fn zero_blobs_are_fully_aerated() {
    let spec = PhantomSpec {
        blobs: vec![],
        ..single_blob(8.0, 2, 0)
    };
    let (_, truth) = generate(&spec).unwrap();
    assert_eq!(
        percent_wal(truth.labels(), OpacityGroups::default()).unwrap(),
        1.0
    );
}

#[test]
fn blob_area_matches_ellipse() {
    for r in [4.0, 6.0, 8.0, 10.0] {
        let (_, truth) = generate(&single_blob(r, 3, 1)).unwrap();
        let count = truth.labels().iter().filter(|&&l| l == 3).count() as f64;
        let area = std::f64::consts::PI * r * r;
        assert!(
            (count - area).abs() <= 0.1 * area,
            "r={r}: {count} voxels vs {area}"
        );
    }
}

#[test]
fn generation_is_deterministic() {
    for seed in 0..5 {
        let spec = PhantomSpec::random([3, 64, 64], 3, seed).unwrap();
        let (v1, t1) = generate(&spec).unwrap();
        let (v2, t2) = generate(&spec).unwrap();
        assert_eq!(v1.voxels(), v2.voxels());
        assert_eq!(t1.labels(), t2.labels());
    }
}

#[test]
fn intensities_follow_tissue() {
    let spec = PhantomSpec {
        noise_std_hu: 0.0,
        ..PhantomSpec::random([2, 64, 64], 4, 3).unwrap()
    };
    let (vol, truth) = generate(&spec).unwrap();
    for (&v, &l) in vol.voxels().iter().zip(truth.labels()) {
        match l {
            1 => assert!((-850..=-650).contains(&v), "lung {v}"),
            2 | 3 => assert!((-600..=-300).contains(&v), "ggo {v}"),
            4 => assert!((-50..=100).contains(&v), "consolidation {v}"),
            _ => {}
        }
    }
}

#[test]
fn jittered_annotator_is_close_but_not_exact() {
    for seed in 0..20 {
        let (_, truth) = generate(&single_blob(8.0 + (seed % 3) as f64, 2, seed)).unwrap();
        let a =
            simulate_annotator(&truth, &AnnotatorModel::noiseless(seed).with_jitter(2.0)).unwrap();
        let v = oracle_iou(a.labels(), truth.labels());
        assert!(v > 0.5 && v < 1.0, "seed {seed}: {v}");
    }
}

#[test]
fn annotators_leave_background_and_lung_outside_blobs() {
    let spec = PhantomSpec::random([2, 64, 64], 3, 8).unwrap();
    let (_, truth) = generate(&spec).unwrap();
    for a in annotators(&truth, 4, 4.0, 0.3, 8) {
        for (&t, &o) in truth.labels().iter().zip(a.labels()) {
            if t == 0 {
                assert_eq!(o, 0);
            } else {
                assert!(o >= 1);
            }
        }
    }
}

#[test]
fn forced_confusion_keeps_opacity_but_loses_group() {
    let (_, truth) = generate(&single_blob(8.0, 2, 4)).unwrap();
    let mut model = AnnotatorModel::noiseless(4);
    model.class_confusion[0] = [0.0, 1.0, 0.0];
    let a = simulate_annotator(&truth, &model).unwrap();
    assert_eq!(oracle_iou(a.labels(), truth.labels()), 1.0);
    let per_group = group_ious(a.labels(), &truth).unwrap();
    assert_eq!(per_group[2], Some(0.0));
    assert_eq!(per_group[1], Some(1.0));
}

fn mean_pairwise(masks: &[LabelMask]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            sum += oracle_iou(masks[i].labels(), masks[j].labels());
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn disagreement_grows_with_jitter() {
    let mut means = Vec::new();
    for jitter in [0.0, 1.0, 2.0, 4.0] {
        let mut total = 0.0;
        for seed in 0..20 {
            let (_, truth) = generate(&PhantomSpec::random([2, 64, 64], 3, seed).unwrap()).unwrap();
            total += mean_pairwise(&annotators(&truth, 12, jitter, 0.0, seed));
        }
        means.push(total / 20.0);
    }
    assert_eq!(means[0], 1.0);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "{means:?}");
    }
}

#[test]
fn fused_labels_beat_individuals() {
    for seed in 0..10 {
        let (_, truth) =
            generate(&PhantomSpec::random([2, 64, 64], 3, 100 + seed).unwrap()).unwrap();
        let masks = annotators(&truth, 24, 2.0, 0.0, seed);
        let soft = fuse(&masks).unwrap();
        let fused: Vec<i8> = soft
            .opacity_mass(OpacityGroups::default())
            .iter()
            .map(|m| if m.unwrap() > 0.5 { 2 } else { 1 })
            .collect();
        let fused_iou = oracle_iou(&fused, truth.labels());
        let individual = masks
            .iter()
            .map(|m| oracle_iou(m.labels(), truth.labels()))
            .sum::<f64>()
            / 24.0;
        assert!(
            fused_iou > individual,
            "seed {seed}: fused {fused_iou} vs mean individual {individual}"
        );
    }
}

#[test]
fn annotators_agree_more_with_the_average_than_with_peers() {
    let (mut hits, mut total) = (0, 0);
    for seed in 0..20 {
        let (_, truth) =
            generate(&PhantomSpec::random([2, 64, 64], 4, 200 + seed).unwrap()).unwrap();
        let masks = annotators(&truth, 12, 2.0, 0.1, seed);
        let m = agreement(&masks, OpacityGroups::default()).unwrap();
        hits += (0..m.len()).filter(|&i| m.closer_to_average(i)).count();
        total += masks.len();
    }
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}
