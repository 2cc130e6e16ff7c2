//! Scan-level train/validation/test partitioning.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("test scan {0:?} is not among the scan IDs")]
    UnknownTestId(String),
    #[error("duplicate scan ID {0:?}")]
    DuplicateId(String),
    #[error("no scans remain after removing the test set")]
    EmptyRemainder,
    #[error("validation fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScanSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl ScanSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of validation scans drawn from `remainder` scans.
pub fn validation_count(remainder: usize, val_fraction: f64) -> usize {
    (libm::round(val_fraction * remainder as f64) as usize).clamp(1, remainder)
}

/// Splits whole scans so that no scan contributes slices to two partitions.
///
/// The test set is exactly `test_ids`; the remaining scans are shuffled with
/// `seed` and `round(val_fraction * remaining)` (at least one) go to
/// validation. Each partition keeps the input order of `scan_ids`.
pub fn split_scans(
    scan_ids: &[String],
    test_ids: &[String],
    val_fraction: f64,
    seed: u64,
) -> Result<ScanSplit, SplitError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(SplitError::InvalidFraction(val_fraction));
    }
    for (i, id) in scan_ids.iter().enumerate() {
        if scan_ids[..i].contains(id) {
            return Err(SplitError::DuplicateId(id.clone()));
        }
    }
    if let Some(bad) = test_ids.iter().find(|t| !scan_ids.contains(t)) {
        return Err(SplitError::UnknownTestId(bad.clone()));
    }
    let mut remainder: Vec<usize> = (0..scan_ids.len())
        .filter(|&i| !test_ids.contains(&scan_ids[i]))
        .collect();
    if remainder.is_empty() {
        return Err(SplitError::EmptyRemainder);
    }
    let n_val = validation_count(remainder.len(), val_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    remainder.shuffle(&mut rng);
    let mut val_idx = remainder[..n_val].to_vec();
    let mut train_idx = remainder[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(ScanSplit {
        train: train_idx.into_iter().map(|i| scan_ids[i].clone()).collect(),
        val: val_idx.into_iter().map(|i| scan_ids[i].clone()).collect(),
        test: scan_ids
            .iter()
            .filter(|id| test_ids.contains(id))
            .cloned()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("scan{i:02}")).collect()
    }

    #[test]
    fn ten_scans_two_test() {
        let all = ids(10);
        let test = vec_of(&all[..2]);
        let s = split_scans(&all, &test, 0.2, 7).unwrap();
        assert_eq!(s.test, test);
        // round(0.2 * 8) = 2
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.len(), 10);
    }

    fn vec_of(s: &[String]) -> Vec<String> {
        s.to_vec()
    }

    #[test]
    fn all_test_is_empty_remainder() {
        let all = ids(3);
        assert_eq!(
            split_scans(&all, &all, 0.2, 0),
            Err(SplitError::EmptyRemainder)
        );
    }

    #[test]
    fn unknown_test_id() {
        let all = ids(3);
        let bad = alloc::vec![String::from("nope")];
        assert_eq!(
            split_scans(&all, &bad, 0.2, 0),
            Err(SplitError::UnknownTestId("nope".into()))
        );
    }

    #[test]
    fn fraction_bounds() {
        let all = ids(3);
        assert!(split_scans(&all, &[], 0.0, 0).is_err());
        assert!(split_scans(&all, &[], 1.0, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let all = ids(20);
        assert_eq!(
            split_scans(&all, &[], 0.2, 42).unwrap(),
            split_scans(&all, &[], 0.2, 42).unwrap()
        );
    }

    #[test]
    fn at_least_one_validation_scan() {
        assert_eq!(validation_count(2, 0.2), 1);
        assert_eq!(validation_count(1, 0.2), 1);
        assert_eq!(validation_count(8, 0.2), 2);
    }
}
