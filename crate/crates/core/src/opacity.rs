//! Binary opacity views of label masks and probability maps.

use alloc::vec::Vec;
use core::fmt;

use crate::taxonomy::{LabelKind, N_GROUPS, OPACITY_GROUPS, UNLABELLED};

/// Set of group IDs treated as opacity, stored as a bit set over groups 0..=4.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpacityGroups(u8);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OpacityGroupsError {
    #[error("group {0} is outside 0..=4")]
    OutOfRange(i64),
    #[error("opacity group set must be non-empty and leave at least one non-opacity group")]
    Degenerate,
    #[error("cannot parse opacity group {0:?}")]
    Parse(alloc::string::String),
}

impl OpacityGroups {
    pub fn new(groups: &[i8]) -> Result<Self, OpacityGroupsError> {
        let mut bits = 0u8;
        for &g in groups {
            if !(0..N_GROUPS as i8).contains(&g) {
                return Err(OpacityGroupsError::OutOfRange(g as i64));
            }
            bits |= 1 << g;
        }
        if bits == 0 || bits.count_ones() as usize == N_GROUPS {
            return Err(OpacityGroupsError::Degenerate);
        }
        Ok(OpacityGroups(bits))
    }

    /// Parses a comma-separated list such as `"2,3,4"`.
    pub fn parse(s: &str) -> Result<Self, OpacityGroupsError> {
        let mut groups = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let g: i64 = part
                .parse()
                .map_err(|_| OpacityGroupsError::Parse(part.into()))?;
            if !(0..N_GROUPS as i64).contains(&g) {
                return Err(OpacityGroupsError::OutOfRange(g));
            }
            groups.push(g as i8);
        }
        Self::new(&groups)
    }

    #[inline]
    pub fn contains(&self, group: i8) -> bool {
        (0..N_GROUPS as i8).contains(&group) && self.0 & (1 << group) != 0
    }

    pub fn iter(&self) -> impl Iterator<Item = i8> + '_ {
        (0..N_GROUPS as i8).filter(move |&g| self.contains(g))
    }

    /// Whether a label of the given kind falls in an opacity group.
    /// `None` for the unlabelled marker or invalid labels.
    #[inline]
    pub fn classify(&self, label: i8, kind: LabelKind) -> Option<bool> {
        if label == UNLABELLED {
            return None;
        }
        kind.group_of(label).map(|g| self.contains(g))
    }
}

impl Default for OpacityGroups {
    fn default() -> Self {
        OpacityGroups::new(&OPACITY_GROUPS).expect("standard opacity groups are valid")
    }
}

impl fmt::Debug for OpacityGroups {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for OpacityGroups {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{g}")?;
        }
        Ok(())
    }
}

/// Per-pixel binary opacity label: `Some(true)` opacity, `Some(false)` not,
/// `None` unlabelled.
pub type OpacityLabel = Option<bool>;

/// Binarizes raw labels of the given kind.
pub fn opacity_from_labels(
    labels: &[i8],
    kind: LabelKind,
    groups: OpacityGroups,
) -> Vec<OpacityLabel> {
    labels.iter().map(|&l| groups.classify(l, kind)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_default() {
        let g = OpacityGroups::parse("2,3,4").unwrap();
        assert_eq!(g, OpacityGroups::default());
        assert_eq!(alloc::format!("{g}"), "2,3,4");
        assert!(g.contains(3) && !g.contains(1) && !g.contains(-1));
    }

    #[test]
    fn parse_rejects() {
        assert!(OpacityGroups::parse("2,7").is_err());
        assert!(OpacityGroups::parse("").is_err());
        assert!(OpacityGroups::parse("0,1,2,3,4").is_err());
        assert!(OpacityGroups::parse("x").is_err());
    }

    #[test]
    fn classify_class_labels_through_groups() {
        let g = OpacityGroups::default();
        assert_eq!(g.classify(7, LabelKind::Class), Some(true));
        assert_eq!(g.classify(2, LabelKind::Class), Some(false));
        assert_eq!(g.classify(2, LabelKind::Group), Some(true));
        assert_eq!(g.classify(-1, LabelKind::Group), None);
    }
}
