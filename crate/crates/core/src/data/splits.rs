//! Patient-level k-fold splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SeedPart};

/// Fold index of every patient. Fold `f` is the test split of the `f`-th run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
    /// Non-fatal problems found while splitting.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn test_ids(&self, fold: usize) -> Vec<String> {
        self.fold_of.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.clone()).collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.fold_of.iter().filter(|(_, &f)| f != fold).map(|(id, _)| id.clone()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.fold_of.values().for_each(|&f| sizes[f] += 1);
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitStrategy {
    /// Stratified when the index carries more than one pathology, random otherwise.
    Auto,
    Stratified,
    Random,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("{n} patients cannot fill {k} folds")));
    }
    Ok(())
}

/// Deals `ids` round-robin starting at fold `start`; returns the next start.
fn deal(ids: &[String], k: usize, start: usize, into: &mut BTreeMap<String, usize>) -> usize {
    for (i, id) in ids.iter().enumerate() {
        into.insert(id.clone(), (start + i) % k);
    }
    (start + ids.len()) % k
}

/// Shuffles each pathology group (seeded) and deals it round-robin into `k` folds.
/// Successive groups continue where the previous one stopped so overall fold
/// sizes also stay within one patient of each other.
pub fn stratified_kfold(index: &DatasetIndex, k: usize, seed: u64) -> Result<FoldAssignment> {
    check_k(k, index.len())?;
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for p in &index.patients {
        groups.entry(p.pathology.as_str()).or_default().push(p.id.clone());
    }
    let mut fold_of = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut start = 0;
    for (tag, mut ids) in groups {
        if ids.len() < k {
            warnings.push(format!(
                "pathology {tag} has {} patients, fewer than {k} folds; some test folds lack it",
                ids.len()
            ));
        }
        ids.sort();
        ids.shuffle(&mut rng_from_seed(derive_seed(seed, &[SeedPart::Str(tag)])));
        start = deal(&ids, k, start, &mut fold_of);
    }
    Ok(FoldAssignment { k, fold_of, warnings })
}

/// Patient-level shuffle and round-robin deal.
pub fn random_kfold(index: &DatasetIndex, k: usize, seed: u64) -> Result<FoldAssignment> {
    check_k(k, index.len())?;
    let mut ids = index.patient_ids();
    ids.sort();
    ids.shuffle(&mut rng_from_seed(seed));
    let mut fold_of = BTreeMap::new();
    deal(&ids, k, 0, &mut fold_of);
    Ok(FoldAssignment { k, fold_of, warnings: vec![] })
}

pub fn kfold(index: &DatasetIndex, k: usize, seed: u64, strategy: SplitStrategy) -> Result<FoldAssignment> {
    match strategy {
        SplitStrategy::Stratified => stratified_kfold(index, k, seed),
        SplitStrategy::Random => random_kfold(index, k, seed),
        SplitStrategy::Auto if index.pathologies().len() > 1 => stratified_kfold(index, k, seed),
        SplitStrategy::Auto => random_kfold(index, k, seed),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{Patient, Volume, VolumeSample, Phase};
    use proptest::prelude::{proptest, prop_assert, prop_assert_eq, ProptestConfig};

    /// Patients without volumes; splitting only looks at ids and tags.
    pub(crate) fn bare_index(groups: &[(&str, usize)]) -> DatasetIndex {
        let mut patients = vec![];
        for (tag, n) in groups {
            for i in 0..*n {
                patients.push(Patient { id: format!("{tag}{i:03}"), pathology: tag.to_string(), volumes: vec![] });
            }
        }
        DatasetIndex { cohort: "A".into(), patients }
    }

    #[test]
    fn stratified_five_by_twenty_layout() {
        let idx = bare_index(&[("NOR", 20), ("MINF", 20), ("DCM", 20), ("HCM", 20), ("ARV", 20)]);
        let a = stratified_kfold(&idx, 4, 1).unwrap();
        for fold in 0..4 {
            let test = a.test_ids(fold);
            let train = a.train_ids(fold);
            assert_eq!(test.len(), 25);
            assert_eq!(train.len(), 75);
            for tag in ["NOR", "MINF", "DCM", "HCM", "ARV"] {
                assert_eq!(test.iter().filter(|id| id.starts_with(tag)).count(), 5);
                assert_eq!(train.iter().filter(|id| id.starts_with(tag)).count(), 15);
            }
            assert!(test.iter().all(|id| !train.contains(id)));
        }
        assert!(a.warnings.is_empty());
        assert_eq!(a, stratified_kfold(&idx, 4, 1).unwrap());
        assert_ne!(a, stratified_kfold(&idx, 4, 2).unwrap());
    }

    #[test]
    fn random_uneven_and_loo() {
        let idx = bare_index(&[("TOF", 203)]);
        let a = random_kfold(&idx, 4, 3).unwrap();
        let mut sizes = a.fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![50, 51, 51, 51]);
        let train: Vec<usize> = (0..4).map(|f| a.train_ids(f).len()).collect();
        assert_eq!(train.iter().filter(|&&n| n == 152).count(), 3);
        assert_eq!(train.iter().filter(|&&n| n == 153).count(), 1);
        assert_eq!(a, random_kfold(&idx, 4, 3).unwrap());

        let loo = random_kfold(&bare_index(&[("X", 4)]), 4, 0).unwrap();
        assert_eq!(loo.fold_sizes(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn small_stratum_warns() {
        let idx = bare_index(&[("NOR", 8), ("RARE", 2)]);
        let a = stratified_kfold(&idx, 4, 0).unwrap();
        assert_eq!(a.warnings.len(), 1);
        assert_eq!(a.fold_of.len(), 10);
        assert!(random_kfold(&bare_index(&[("X", 3)]), 4, 0).is_err());
    }

    #[test]
    fn auto_picks_by_pathology_count() {
        let single = bare_index(&[("TOF", 9)]);
        assert_eq!(kfold(&single, 4, 5, SplitStrategy::Auto).unwrap(), random_kfold(&single, 4, 5).unwrap());
        let multi = bare_index(&[("A", 4), ("B", 4)]);
        assert_eq!(kfold(&multi, 4, 5, SplitStrategy::Auto).unwrap(), stratified_kfold(&multi, 4, 5).unwrap());
    }

    #[test]
    fn splits_by_patient_not_volume() {
        let vol = |id: &str, phase| VolumeSample {
            patient_id: id.into(),
            pathology: "NOR".into(),
            phase,
            image: Volume::new([1, 1, 1], vec![0.0]).unwrap(),
            mask: Volume::new([1, 1, 1], vec![0]).unwrap(),
            spacing: [1.0; 3],
        };
        let samples = (0..8).flat_map(|i| [vol(&format!("p{i}"), Phase::ED), vol(&format!("p{i}"), Phase::ES)]).collect();
        let idx = DatasetIndex::from_samples("A", samples).unwrap();
        let a = random_kfold(&idx, 4, 0).unwrap();
        assert_eq!(a.fold_of.len(), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn stratified_balance(sizes in proptest::collection::vec(4usize..30, 1..6), k in 2usize..5, seed in 0u64..1000) {
            let tags = ["a", "b", "c", "d", "e", "f"];
            let groups: Vec<(&str, usize)> = sizes.iter().enumerate().map(|(i, &n)| (tags[i], n)).collect();
            let idx = bare_index(&groups);
            let a = stratified_kfold(&idx, k, seed).unwrap();
            prop_assert_eq!(a.fold_of.len(), idx.len());
            let total = a.fold_sizes();
            prop_assert!(total.iter().max().unwrap() - total.iter().min().unwrap() <= 1);
            for (tag, _) in &groups {
                let per: Vec<usize> = (0..k).map(|f| a.test_ids(f).iter().filter(|id| id.starts_with(tag)).count()).collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }
    }
}
