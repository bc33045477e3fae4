use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Seeded, stratified partition of `0..n` into `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    /// Rows held out in fold `k` (evaluation rows).
    pub fn rows_in(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == k).collect()
    }

    /// Rows outside fold `k` (training rows).
    pub fn rows_out(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != k).collect()
    }
}

/// Assigns folds round-robin within each stratum after a seeded shuffle.
///
/// The round-robin offset carries across strata, so overall fold sizes and
/// per-stratum fold sizes each differ by at most one.
pub(crate) fn stratified_assignment<R: Rng>(strata: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let n_strata = strata.iter().copied().max().map_or(0, |m| m + 1);
    let mut fold_of = vec![0; strata.len()];
    let mut offset = 0;
    for s in 0..n_strata {
        let mut members: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == s).collect();
        members.shuffle(rng);
        for (t, &i) in members.iter().enumerate() {
            fold_of[i] = (offset + t) % k;
        }
        offset = (offset + members.len()) % k;
    }
    fold_of
}

/// Exposure-stratified `k`-fold split, deterministic given `seed`.
pub fn make_folds(n: usize, k: usize, a: &[u8], seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::config(format!("cannot split {n} samples into {k} folds")));
    }
    if a.len() != n {
        return Err(Error::invalid("exposure length does not match n"));
    }
    let mut warnings = Vec::new();
    for arm in 0..2u8 {
        let count = a.iter().filter(|&&v| v == arm).count();
        if count < k {
            let msg = format!("exposure arm {arm} has {count} members, fewer than {k} folds; some folds lack that arm");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let strata: Vec<usize> = a.iter().map(|&v| v as usize).collect();
    let mut rng = rng::stream(seed, &[0xF01D]);
    let fold_of = stratified_assignment(&strata, k, &mut rng);
    Ok(FoldAssignment { k, fold_of, seed, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counts(f: &FoldAssignment, a: &[u8], arm: u8) -> Vec<usize> {
        (0..f.k)
            .map(|k| (0..a.len()).filter(|&i| f.fold_of[i] == k && a[i] == arm).count())
            .collect()
    }

    #[test]
    fn balanced_ten_by_five() {
        let a = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let f = make_folds(10, 5, &a, 42).unwrap();
        assert_eq!(counts(&f, &a, 0), vec![1; 5]);
        assert_eq!(counts(&f, &a, 1), vec![1; 5]);
        assert!(f.warnings.is_empty());
    }

    #[test]
    fn deterministic_given_seed() {
        let a: Vec<u8> = (0..37).map(|i| (i % 3 == 0) as u8).collect();
        assert_eq!(make_folds(37, 4, &a, 9).unwrap(), make_folds(37, 4, &a, 9).unwrap());
        assert_ne!(make_folds(37, 4, &a, 9).unwrap().fold_of, make_folds(37, 4, &a, 10).unwrap().fold_of);
    }

    #[test]
    fn thirty_percent_exposed() {
        // fixed seeded draw with exactly 30 exposed rows out of 100
        let mut a = vec![0u8; 100];
        a[..30].fill(1);
        a.shuffle(&mut ChaCha8Rng::seed_from_u64(2024));
        let f = make_folds(100, 5, &a, 1).unwrap();
        assert_eq!(counts(&f, &a, 1), vec![6; 5]);
        assert_eq!(counts(&f, &a, 0), vec![14; 5]);
    }

    #[test]
    fn small_arm_warns_but_builds() {
        let a = vec![1, 0, 0, 0, 0, 0];
        let f = make_folds(6, 3, &a, 0).unwrap();
        assert_eq!(f.warnings.len(), 1);
        assert!((0..3).all(|k| !f.rows_in(k).is_empty()));
    }

    #[test]
    fn sizes_differ_by_at_most_one() {
        for n in [7usize, 23, 50] {
            let a: Vec<u8> = (0..n).map(|i| (i * 7 % 5 < 2) as u8).collect();
            let f = make_folds(n, 5, &a, n as u64).unwrap();
            for arm in 0..2 {
                let c = counts(&f, &a, arm);
                assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
            }
            let sizes: Vec<usize> = (0..5).map(|k| f.rows_in(k).len()).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn rejects_bad_k() {
        assert!(make_folds(10, 1, &[0; 10], 0).is_err());
        assert!(make_folds(3, 5, &[0, 1, 0], 0).is_err());
    }
}
