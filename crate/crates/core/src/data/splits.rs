use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetRegistry, Domain};
use crate::error::{DafosError, Result};
use crate::rng::{rng_for, stream};

pub const SPLITS_FORMAT_VERSION: u32 = 1;

/// Requested split sizes and the seed that drives the class shuffle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub test_known: usize,
    pub test_unknown: usize,
    pub seed: u64,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            source_train: 10,
            target_train: 6,
            test_known: 5,
            test_unknown: 5,
            seed: 0,
        }
    }
}

/// Disjoint class partitions of a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplits {
    pub version: u32,
    pub seed: u64,
    /// Source-domain training classes.
    pub source_train: Vec<String>,
    /// Few-shot target-domain training classes.
    pub target_train: Vec<String>,
    /// Target test classes that receive a support set.
    pub test_known: Vec<String>,
    /// Target test classes that only appear as open-set queries.
    pub test_unknown: Vec<String>,
}

impl ClassSplits {
    /// Checks every pairwise disjointness condition and that no split is empty.
    pub fn validate(&self) -> Result<()> {
        if self.version != SPLITS_FORMAT_VERSION {
            return Err(DafosError::Data(format!(
                "unsupported splits version {} (expected {SPLITS_FORMAT_VERSION})",
                self.version
            )));
        }
        let sets: [(&str, BTreeSet<&String>); 4] = [
            ("source_train", self.source_train.iter().collect()),
            ("target_train", self.target_train.iter().collect()),
            ("test_known", self.test_known.iter().collect()),
            ("test_unknown", self.test_unknown.iter().collect()),
        ];
        for (name, set) in &sets {
            if set.is_empty() {
                return Err(DafosError::Data(format!("split `{name}` is empty")));
            }
        }
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                if let Some(c) = sets[i].1.intersection(&sets[j].1).next() {
                    return Err(DafosError::Data(format!(
                        "overlap: class `{c}` in both `{}` and `{}`",
                        sets[i].0, sets[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    /// All target test classes (known and unknown).
    pub fn test_all(&self) -> impl Iterator<Item = &String> {
        self.test_known.iter().chain(&self.test_unknown)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| DafosError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DafosError::io(path, e))?;
        let splits: ClassSplits = serde_json::from_str(&text)?;
        splits.validate()?;
        Ok(splits)
    }
}

/// Shuffles the sorted class universe with `sizes.seed`, then fills
/// `source_train` from source-domain classes and the three target splits from
/// the remaining target-domain classes.
pub fn make_class_splits(registry: &DatasetRegistry, sizes: &SplitSizes) -> Result<ClassSplits> {
    for (name, n) in [
        ("source_train", sizes.source_train),
        ("target_train", sizes.target_train),
        ("test_known", sizes.test_known),
        ("test_unknown", sizes.test_unknown),
    ] {
        if n == 0 {
            return Err(DafosError::config(format!("splits.{name}"), "must be at least 1"));
        }
    }
    let mut universe: Vec<&String> = registry
        .source
        .classes
        .keys()
        .chain(registry.target.classes.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = rng_for(sizes.seed, &[stream::SPLITS]);
    universe.shuffle(&mut rng);

    let in_domain = |d: Domain, c: &String| registry.domain(d).classes.contains_key(c);
    let source_train: Vec<String> = universe
        .iter()
        .filter(|c| in_domain(Domain::Source, c))
        .take(sizes.source_train)
        .map(|c| (*c).clone())
        .collect();
    if source_train.len() < sizes.source_train {
        return Err(DafosError::InsufficientClasses(format!(
            "requested {} source classes, {} available",
            sizes.source_train,
            source_train.len()
        )));
    }
    let taken: BTreeSet<&String> = source_train.iter().collect();
    let target_pool: Vec<String> = universe
        .iter()
        .filter(|c| !taken.contains(*c) && in_domain(Domain::Target, c))
        .map(|c| (*c).clone())
        .collect();
    let need = sizes.target_train + sizes.test_known + sizes.test_unknown;
    if target_pool.len() < need {
        return Err(DafosError::InsufficientClasses(format!(
            "requested {need} target classes, {} available after the source split",
            target_pool.len()
        )));
    }
    let mut it = target_pool.into_iter();
    let mut take = |n: usize| -> Vec<String> { it.by_ref().take(n).collect() };
    let target_train = take(sizes.target_train);
    let test_known = take(sizes.test_known);
    let test_unknown = take(sizes.test_unknown);

    let splits = ClassSplits {
        version: SPLITS_FORMAT_VERSION,
        seed: sizes.seed,
        source_train,
        target_train,
        test_known,
        test_unknown,
    };
    splits.validate()?;
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_registry, DatasetSpec, SyntheticTask};

    fn registry(classes: usize) -> DatasetRegistry {
        let spec = DatasetSpec {
            synthetic: Some(SyntheticTask {
                classes,
                samples_per_class: 2,
                ..Default::default()
            }),
            ..Default::default()
        };
        load_registry(None, &spec).unwrap()
    }

    fn sizes(a: usize, b: usize, c: usize, d: usize, seed: u64) -> SplitSizes {
        SplitSizes {
            source_train: a,
            target_train: b,
            test_known: c,
            test_unknown: d,
            seed,
        }
    }

    #[test]
    fn office_home_sizes() {
        let s = make_class_splits(&registry(65), &sizes(25, 10, 15, 15, 1)).unwrap();
        assert_eq!(
            (s.source_train.len(), s.target_train.len(), s.test_known.len(), s.test_unknown.len()),
            (25, 10, 15, 15)
        );
    }

    #[test]
    fn domainnet_sizes_consume_all_classes() {
        let s = make_class_splits(&registry(345), &sizes(125, 75, 80, 65, 2)).unwrap();
        let all: BTreeSet<_> = s
            .source_train
            .iter()
            .chain(&s.target_train)
            .chain(s.test_all())
            .collect();
        assert_eq!(all.len(), 345);
    }

    #[test]
    fn same_seed_same_splits() {
        let r = registry(30);
        let a = make_class_splits(&r, &sizes(10, 6, 5, 5, 9)).unwrap();
        let b = make_class_splits(&r, &sizes(10, 6, 5, 5, 9)).unwrap();
        assert_eq!(a, b);
        let c = make_class_splits(&r, &sizes(10, 6, 5, 5, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_request_fails() {
        let err = make_class_splits(&registry(20), &sizes(10, 6, 5, 5, 0)).unwrap_err();
        assert!(matches!(err, DafosError::InsufficientClasses(_)));
    }

    #[test]
    fn overlap_is_detected_on_validate() {
        let mut s = make_class_splits(&registry(26), &SplitSizes::default()).unwrap();
        s.test_unknown.push(s.target_train[0].clone());
        assert!(s.validate().unwrap_err().to_string().contains("overlap"));
    }

    #[test]
    fn save_load_round_trip() {
        let s = make_class_splits(&registry(26), &SplitSizes::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.json");
        s.save(&p).unwrap();
        assert_eq!(ClassSplits::load(&p).unwrap(), s);
    }
}
