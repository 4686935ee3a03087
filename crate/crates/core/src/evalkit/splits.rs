use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// `"loso"` or `"kfold-{k}"`.
    pub scheme: String,
    pub folds: Vec<Fold>,
    pub seed: Option<u64>,
}

/// One fold per distinct subject, in sorted subject order.
pub fn make_loso_splits(subjects: &[String]) -> Result<SplitPlan, EvalError> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        by_subject.entry(s.as_str()).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(EvalError::Split(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            by_subject.len()
        )));
    }
    let folds = by_subject
        .values()
        .map(|test| Fold {
            train: (0..subjects.len()).filter(|i| !test.contains(i)).collect(),
            test: test.clone(),
        })
        .collect();
    Ok(SplitPlan {
        scheme: "loso".into(),
        folds,
        seed: None,
    })
}

/// Stratified k-fold: each class is shuffled with a seeded generator and
/// dealt round-robin across folds. Each class starts where the previous
/// one stopped so total fold sizes also stay within one of each other.
pub fn make_kfold_splits(labels: &[usize], k: usize, seed: u64) -> Result<SplitPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::Split(format!("k = {k}, needs at least 2")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if let Some((class, members)) = by_class.iter().find(|(_, m)| m.len() < k) {
        return Err(EvalError::Stratification {
            class: *class,
            count: members.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for members in by_class.values() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        for m in members {
            tests[next].push(m);
            next = (next + 1) % k;
        }
    }
    let folds = tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let held: BTreeSet<usize> = test.iter().copied().collect();
            Fold {
                train: (0..labels.len()).filter(|i| !held.contains(i)).collect(),
                test,
            }
        })
        .collect();
    Ok(SplitPlan {
        scheme: format!("kfold-{k}"),
        folds,
        seed: Some(seed),
    })
}

impl SplitPlan {
    /// Checks disjointness and exact coverage over `n` records; with
    /// `subjects`, also that no subject spans train and test of a fold.
    pub fn check(&self, n: usize, subjects: Option<&[String]>) -> Result<(), String> {
        let mut covered = vec![0usize; n];
        for (f, fold) in self.folds.iter().enumerate() {
            let train: BTreeSet<usize> = fold.train.iter().copied().collect();
            let test: BTreeSet<usize> = fold.test.iter().copied().collect();
            if train.len() != fold.train.len() || test.len() != fold.test.len() {
                return Err(format!("fold {f} repeats a record"));
            }
            if let Some(i) = train.intersection(&test).next() {
                return Err(format!("fold {f}: record {i} in train and test"));
            }
            if train.len() + test.len() != n || train.iter().chain(&test).any(|&i| i >= n) {
                return Err(format!("fold {f} does not partition the {n} records"));
            }
            for &i in &test {
                covered[i] += 1;
            }
            if let Some(s) = subjects {
                let ts: BTreeSet<&str> = test.iter().map(|&i| s[i].as_str()).collect();
                if let Some(&i) = train.iter().find(|&&i| ts.contains(s[i].as_str())) {
                    return Err(format!("fold {f}: subject {} on both sides (record {i})", s[i]));
                }
            }
        }
        if let Some(i) = covered.iter().position(|&c| c != 1) {
            return Err(format!("record {i} tested {} times", covered[i]));
        }
        Ok(())
    }
}
