use opaseg_core::metrics::{
    iou, lung_and_opacity_counts, relative_volume, ConfusionAccumulator, ProbMap, OPACITY,
};
use opaseg_core::opacity::{opacity_from_labels, OpacityGroups};
use opaseg_core::taxonomy::{LabelKind, N_GROUPS};
use opaseg_core::volume::LabelMask;

use crate::error::{Error, Result};

pub enum Prediction {
    /// Soft output: opacity by summed group mass, groups by argmax.
    Probs(ProbMap),
    /// Hard group labels.
    Mask(LabelMask),
}

impl Prediction {
    fn groups(&self) -> Vec<i8> {
        match self {
            Prediction::Probs(p) => p.argmax(),
            Prediction::Mask(m) => m.labels().to_vec(),
        }
    }

    fn opacity(&self, groups: OpacityGroups) -> Vec<bool> {
        match self {
            Prediction::Probs(p) => p.opacity_by_mass(groups),
            Prediction::Mask(m) => opacity_from_labels(m.labels(), m.kind(), groups)
                .into_iter()
                .map(|o| o == Some(true))
                .collect(),
        }
    }

    fn shape(&self) -> [usize; 3] {
        match self {
            Prediction::Probs(p) => p.shape().as_array(),
            Prediction::Mask(m) => m.shape().as_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scan: String,
    pub metric: &'static str,
    pub group: String,
    /// `None` when the metric is undefined (empty union, no ground-truth opacity).
    pub value: Option<f64>,
}

impl ReportRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.scan.clone(),
            self.metric.into(),
            self.group.clone(),
            self.value.map(|v| v.to_string()).unwrap_or_default(),
        ]
    }
}

pub const REPORT_HEADER: [&str; 4] = ["scan", "metric", "group", "value"];
pub const ALL_SCANS: &str = "ALL";

#[derive(Clone)]
struct Tally {
    groups: ConfusionAccumulator,
    opacity: ConfusionAccumulator,
    pred_wal: (u64, u64),
    gt_wal: (u64, u64),
}

impl Tally {
    fn new() -> Self {
        Tally {
            groups: ConfusionAccumulator::new(N_GROUPS),
            opacity: ConfusionAccumulator::binary(),
            pred_wal: (0, 0),
            gt_wal: (0, 0),
        }
    }

    fn merge(&mut self, o: &Tally) {
        self.groups.merge(&o.groups).expect("same label sets");
        self.opacity.merge(&o.opacity).expect("same label sets");
        self.pred_wal = (
            self.pred_wal.0 + o.pred_wal.0,
            self.pred_wal.1 + o.pred_wal.1,
        );
        self.gt_wal = (self.gt_wal.0 + o.gt_wal.0, self.gt_wal.1 + o.gt_wal.1);
    }

    fn rows(&self, scan: &str) -> Vec<ReportRow> {
        let row = |metric, group: String, value| ReportRow {
            scan: scan.into(),
            metric,
            group,
            value,
        };
        let mut rows: Vec<ReportRow> = (0..N_GROUPS as i8)
            .map(|g| {
                row(
                    "iou",
                    g.to_string(),
                    iou(&self.groups, g).expect("group label"),
                )
            })
            .collect();
        rows.push(row(
            "opacity_iou",
            "opacity".into(),
            iou(&self.opacity, OPACITY).expect("binary label"),
        ));
        rows.push(row(
            "relative_volume",
            "opacity".into(),
            relative_volume(&self.opacity).ok(),
        ));
        let wal =
            |(lung, opa): (u64, u64)| (lung + opa > 0).then(|| lung as f64 / (lung + opa) as f64);
        rows.push(row("percent_wal_pred", "lung".into(), wal(self.pred_wal)));
        rows.push(row("percent_wal_gt", "lung".into(), wal(self.gt_wal)));
        rows
    }
}

/// Per-scan rows followed by rows pooled over every scan.
pub fn evaluate(
    pairs: &[(String, Prediction, LabelMask)],
    groups: OpacityGroups,
) -> Result<Vec<ReportRow>> {
    let mut all = Tally::new();
    let mut rows = Vec::new();
    for (scan, pred, gt) in pairs {
        if gt.kind() != LabelKind::Group {
            return Err(Error::validation(format!(
                "{scan}: ground truth must hold group labels"
            )));
        }
        if pred.shape() != gt.shape().as_array() {
            return Err(Error::validation(format!(
                "{scan}: prediction shape {:?} differs from ground truth {:?}",
                pred.shape(),
                gt.shape().as_array()
            )));
        }
        let pred_groups = pred.groups();
        let mut t = Tally::new();
        t.groups.accumulate(&pred_groups, gt.labels())?;
        t.opacity.accumulate_binary(
            &pred.opacity(groups),
            &opacity_from_labels(gt.labels(), gt.kind(), groups),
        )?;
        t.pred_wal = lung_and_opacity_counts(&pred_groups, groups);
        t.gt_wal = lung_and_opacity_counts(gt.labels(), groups);
        rows.extend(t.rows(scan));
        all.merge(&t);
    }
    rows.extend(all.rows(ALL_SCANS));
    Ok(rows)
}
