//! The fixed class and group taxonomy for pulmonary opacity annotation.
//!
//! Eleven labelled classes (0..=10) plus an "unlabelled" marker (-1) are
//! collapsed into five training groups (0..=4) plus the same marker.

use core::fmt;

/// Class or group ID used for voxels nobody annotated.
pub const UNLABELLED: i8 = -1;

/// Number of labelled classes (0..=10).
pub const N_CLASSES: usize = 11;

/// Number of training groups (0..=4).
pub const N_GROUPS: usize = 5;

pub const GROUP_BACKGROUND: i8 = 0;
pub const GROUP_LUNG: i8 = 1;
pub const GROUP_PURE_GGO: i8 = 2;
pub const GROUP_GGO_SEPTAL: i8 = 3;
pub const GROUP_CONSOLIDATIVE: i8 = 4;

/// The groups that count as pulmonary opacification.
pub const OPACITY_GROUPS: [i8; 3] = [GROUP_PURE_GGO, GROUP_GGO_SEPTAL, GROUP_CONSOLIDATIVE];

/// One row of the class table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassEntry {
    pub class_id: i8,
    pub name: &'static str,
    pub group_id: i8,
    /// Fraction of all voxels in the reference dataset carrying this class.
    pub prevalence: f64,
}

const ENTRIES: [ClassEntry; 12] = [
    ClassEntry {
        class_id: -1,
        name: "Unlabelled",
        group_id: -1,
        prevalence: 0.0312350,
    },
    ClassEntry {
        class_id: 0,
        name: "Background",
        group_id: 0,
        prevalence: 0.9470900,
    },
    ClassEntry {
        class_id: 1,
        name: "Left Lung",
        group_id: 1,
        prevalence: 0.0048229,
    },
    ClassEntry {
        class_id: 2,
        name: "Right Lung",
        group_id: 1,
        prevalence: 0.0052713,
    },
    ClassEntry {
        class_id: 3,
        name: "Pleural Effusion",
        group_id: 0,
        prevalence: 0.0002021,
    },
    ClassEntry {
        class_id: 4,
        name: "Lymphadenopathy",
        group_id: 0,
        prevalence: 0.0000002,
    },
    ClassEntry {
        class_id: 5,
        name: "Pure Ground Glass Opacification",
        group_id: 2,
        prevalence: 0.0033230,
    },
    ClassEntry {
        class_id: 6,
        name: "GGO w/ Smooth Interlobular Septal Thickening",
        group_id: 3,
        prevalence: 0.0004404,
    },
    ClassEntry {
        class_id: 7,
        name: "GGO w/ Intralobular Lines (Crazy Paving)",
        group_id: 3,
        prevalence: 0.0044893,
    },
    ClassEntry {
        class_id: 8,
        name: "Organizing Pneumonia Pattern",
        group_id: 4,
        prevalence: 0.0012062,
    },
    ClassEntry {
        class_id: 9,
        name: "GGO w/ Peripheral Consolidation (Atoll Sign)",
        group_id: 4,
        prevalence: 0.0001665,
    },
    ClassEntry {
        class_id: 10,
        name: "Consolidation",
        group_id: 4,
        prevalence: 0.0017524,
    },
];

/// Display names for the five groups.
pub const GROUP_NAMES: [&str; N_GROUPS] = [
    "Background",
    "Lung",
    "Pure GGO",
    "GGO with septal lines",
    "Consolidative patterns",
];

/// RGB overlay colour per group: orange background, green lung, red, purple, brown.
pub const GROUP_COLOURS: [[u8; 3]; N_GROUPS] = [
    [255, 165, 0],
    [0, 170, 0],
    [220, 20, 20],
    [140, 40, 200],
    [140, 80, 30],
];

/// Colour for unlabelled voxels (blue).
pub const UNLABELLED_COLOUR: [u8; 3] = [40, 80, 230];

/// The class table. Zero-sized: all data is static.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassTaxonomy;

impl ClassTaxonomy {
    pub const fn standard() -> Self {
        ClassTaxonomy
    }

    /// All entries ordered by class ID, starting with the unlabelled marker.
    pub fn entries(&self) -> &'static [ClassEntry] {
        &ENTRIES
    }

    pub fn entry(&self, class_id: i8) -> Option<&'static ClassEntry> {
        if (-1..=10).contains(&class_id) {
            Some(&ENTRIES[(class_id + 1) as usize])
        } else {
            None
        }
    }

    /// Group of a class ID, or `None` for IDs outside -1..=10.
    pub fn group_of(&self, class_id: i8) -> Option<i8> {
        self.entry(class_id).map(|e| e.group_id)
    }

    /// Summed prevalence of every class in `group_id`.
    pub fn group_prevalence(&self, group_id: i8) -> f64 {
        ENTRIES
            .iter()
            .filter(|e| e.group_id == group_id)
            .map(|e| e.prevalence)
            .sum()
    }

    pub fn is_opacity_group(group_id: i8) -> bool {
        OPACITY_GROUPS.contains(&group_id)
    }
}

/// Whether a label volume holds fine-grained class IDs or collapsed group IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Class,
    Group,
}

impl LabelKind {
    /// Largest valid labelled ID for this kind.
    pub const fn max_label(self) -> i8 {
        match self {
            LabelKind::Class => (N_CLASSES - 1) as i8,
            LabelKind::Group => (N_GROUPS - 1) as i8,
        }
    }

    pub const fn n_labels(self) -> usize {
        match self {
            LabelKind::Class => N_CLASSES,
            LabelKind::Group => N_GROUPS,
        }
    }

    pub fn is_valid(self, label: i8) -> bool {
        (UNLABELLED..=self.max_label()).contains(&label)
    }

    /// Group of `label` under this kind (identity for group labels).
    pub fn group_of(self, label: i8) -> Option<i8> {
        match self {
            LabelKind::Class => ClassTaxonomy.group_of(label),
            LabelKind::Group => self.is_valid(label).then_some(label),
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Class => "class",
            LabelKind::Group => "group",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_entries_each_class_once() {
        let t = ClassTaxonomy::standard();
        assert_eq!(t.entries().len(), 12);
        for (i, e) in t.entries().iter().enumerate() {
            assert_eq!(e.class_id, i as i8 - 1);
        }
    }

    #[test]
    fn group_assignments() {
        let t = ClassTaxonomy::standard();
        let expected = [
            (-1, -1),
            (0, 0),
            (1, 1),
            (2, 1),
            (3, 0),
            (4, 0),
            (5, 2),
            (6, 3),
            (7, 3),
            (8, 4),
            (9, 4),
            (10, 4),
        ];
        for (c, g) in expected {
            assert_eq!(t.group_of(c), Some(g), "class {c}");
        }
        assert_eq!(t.group_of(11), None);
        assert_eq!(t.group_of(-2), None);
    }

    #[test]
    fn prevalences_sum_to_one() {
        let total: f64 = ClassTaxonomy.entries().iter().map(|e| e.prevalence).sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn group_prevalence_sums_member_classes() {
        let t = ClassTaxonomy;
        assert!((t.group_prevalence(1) - (0.0048229 + 0.0052713)).abs() < 1e-15);
        assert!((t.group_prevalence(0) - (0.9470900 + 0.0002021 + 0.0000002)).abs() < 1e-15);
    }

    #[test]
    fn label_kind_ranges() {
        assert!(LabelKind::Group.is_valid(4));
        assert!(!LabelKind::Group.is_valid(5));
        assert!(LabelKind::Class.is_valid(10));
        assert_eq!(LabelKind::Class.group_of(7), Some(3));
        assert_eq!(LabelKind::Group.group_of(3), Some(3));
    }
}
