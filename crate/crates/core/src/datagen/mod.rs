//! Datasets, deletion partitions and train/test splits.

pub mod scm;
pub mod tabular;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use scm::{attach_sensitive_from_background, generate_scm_dataset, ScmSpec};
pub use tabular::{load_tabular_csv, save_tabular_csv, CsvSchema};

/// Ground-truth role of one feature coordinate, when known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Causal,
    Background,
    Sensitive,
}

/// A labeled feature matrix with class-to-concept structure and optional
/// sensitive attribute / background metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Concept id per class; length is the number of classes.
    pub concept_of_class: Vec<usize>,
    /// Binary sensitive attribute per row (1 = privileged), if present.
    pub sensitive: Option<Vec<u8>>,
    /// Realized background index per row, if known (SCM data).
    pub background_id: Option<Vec<usize>>,
    /// Per-coordinate role tag, where known.
    pub feature_roles: Option<Vec<Option<FeatureRole>>>,
}

impl Dataset {
    pub fn num_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.concept_of_class.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_rows();
        let k = self.num_classes();
        if self.labels.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{n} rows but {} labels",
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} out of range for {k} classes (concept map not total)"
            )));
        }
        if let Some(s) = &self.sensitive {
            if s.len() != n {
                return Err(Error::InvalidDataset("sensitive length mismatch".into()));
            }
            if s.iter().any(|&v| v > 1) {
                return Err(Error::InvalidDataset("sensitive attribute must be binary".into()));
            }
        }
        if let Some(b) = &self.background_id {
            if b.len() != n {
                return Err(Error::InvalidDataset("background_id length mismatch".into()));
            }
        }
        if let Some(r) = &self.feature_roles {
            if r.len() != self.num_features() {
                return Err(Error::InvalidDataset("feature_roles length mismatch".into()));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite feature values".into()));
        }
        Ok(())
    }

    /// Row indices of one class.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Classes sharing the concept of `class`, excluding `class` itself.
    pub fn siblings(&self, class: usize) -> Vec<usize> {
        let concept = self.concept_of_class[class];
        (0..self.num_classes())
            .filter(|&c| c != class && self.concept_of_class[c] == concept)
            .collect()
    }

    /// Valid counterfactual target classes for a source class: same-concept
    /// siblings, or every other class when the concept is a singleton
    /// (binary tabular data).
    pub fn cf_targets(&self, class: usize) -> Vec<usize> {
        let sib = self.siblings(class);
        if !sib.is_empty() {
            return sib;
        }
        (0..self.num_classes()).filter(|&c| c != class).collect()
    }

    /// Coordinates tagged as sensitive.
    pub fn sensitive_coordinates(&self) -> Vec<usize> {
        match &self.feature_roles {
            Some(roles) => roles
                .iter()
                .enumerate()
                .filter(|(_, r)| **r == Some(FeatureRole::Sensitive))
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    /// New dataset containing only the given rows (metadata preserved).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            concept_of_class: self.concept_of_class.clone(),
            sensitive: self
                .sensitive
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            background_id: self
                .background_id
                .as_ref()
                .map(|b| indices.iter().map(|&i| b[i]).collect()),
            feature_roles: self.feature_roles.clone(),
        }
    }
}

/// Deletion request shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Remove a uniform fraction of all rows.
    Uniform { p: f64 },
    /// Remove every row of the listed classes.
    FullClass { classes: Vec<usize> },
    /// Remove a fraction of one class.
    SelectiveClass { class: usize, p: f64 },
    /// Remove a fraction of one sensitive-attribute group.
    SelectiveGroup { attribute_value: u8, p: f64 },
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |p: f64| p > 0.0 && p <= 1.0;
        match self {
            Scenario::Uniform { p } if !frac_ok(*p) => Err(Error::InvalidScenario(format!(
                "uniform fraction {p} outside (0, 1]"
            ))),
            Scenario::FullClass { classes } if classes.is_empty() => {
                Err(Error::InvalidScenario("full_class needs at least one class".into()))
            }
            Scenario::SelectiveClass { p, .. } if !frac_ok(*p) => Err(Error::InvalidScenario(
                format!("selective_class fraction {p} outside (0, 1]"),
            )),
            Scenario::SelectiveGroup { p, attribute_value } => {
                if !frac_ok(*p) {
                    Err(Error::InvalidScenario(format!(
                        "selective_group fraction {p} outside (0, 1]"
                    )))
                } else if *attribute_value > 1 {
                    Err(Error::InvalidScenario("attribute_value must be 0 or 1".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::Uniform { p } => write!(f, "uniform({p:.2})"),
            Scenario::FullClass { classes } => write!(f, "full_class({classes:?})"),
            Scenario::SelectiveClass { class, p } => {
                write!(f, "selective_class({class},{p:.2})")
            }
            Scenario::SelectiveGroup { attribute_value, p } => {
                write!(f, "selective_group({attribute_value},{p:.2})")
            }
        }
    }
}

/// A disjoint split of all row indices into forget and retain sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub forget_indices: Vec<usize>,
    pub retain_indices: Vec<usize>,
    pub scenario: Scenario,
}

impl Partition {
    /// Check disjointness and coverage against a dataset size.
    pub fn validate(&self, num_rows: usize) -> Result<()> {
        let mut seen = vec![false; num_rows];
        for &i in self.forget_indices.iter().chain(&self.retain_indices) {
            if i >= num_rows {
                return Err(Error::InvalidScenario(format!("index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::InvalidScenario(format!(
                    "index {i} appears in both partition sides"
                )));
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidScenario(format!(
                "index {missing} missing from partition"
            )));
        }
        Ok(())
    }
}

/// Build the (D_f, D_r) partition for a deletion scenario.
pub fn make_deletion(dataset: &Dataset, scenario: &Scenario, seed: u64) -> Result<Partition> {
    scenario.validate()?;
    let n = dataset.num_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let forget: Vec<usize> = match scenario {
        Scenario::Uniform { p } => {
            let k = (p * n as f64).floor() as usize;
            sample_without_replacement(&mut rng, &(0..n).collect::<Vec<_>>(), k)
        }
        Scenario::FullClass { classes } => {
            for &c in classes {
                if c >= dataset.num_classes() {
                    return Err(Error::InvalidScenario(format!(
                        "class {c} not present in dataset"
                    )));
                }
                if dataset.class_indices(c).is_empty() {
                    return Err(Error::InvalidScenario(format!("class {c} has no rows")));
                }
            }
            let mut out: Vec<usize> = dataset
                .labels
                .iter()
                .enumerate()
                .filter(|(_, y)| classes.contains(y))
                .map(|(i, _)| i)
                .collect();
            out.sort_unstable();
            out
        }
        Scenario::SelectiveClass { class, p } => {
            if *class >= dataset.num_classes() {
                return Err(Error::InvalidScenario(format!(
                    "class {class} not present in dataset"
                )));
            }
            let pool = dataset.class_indices(*class);
            if pool.is_empty() {
                return Err(Error::InvalidScenario(format!("class {class} has no rows")));
            }
            let k = (p * pool.len() as f64).floor() as usize;
            sample_without_replacement(&mut rng, &pool, k)
        }
        Scenario::SelectiveGroup { attribute_value, p } => {
            let sensitive = dataset.sensitive.as_ref().ok_or_else(|| {
                Error::InvalidScenario("selective_group needs a sensitive attribute".into())
            })?;
            let pool: Vec<usize> = sensitive
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == *attribute_value)
                .map(|(i, _)| i)
                .collect();
            if pool.is_empty() {
                return Err(Error::InvalidScenario(format!(
                    "no rows with sensitive value {attribute_value}"
                )));
            }
            let k = (p * pool.len() as f64).floor() as usize;
            sample_without_replacement(&mut rng, &pool, k)
        }
    };

    if forget.is_empty() {
        return Err(Error::EmptyPartition(format!(
            "scenario {scenario} selects no rows to forget"
        )));
    }
    if forget.len() == n {
        return Err(Error::EmptyPartition(format!(
            "scenario {scenario} leaves no rows to retain"
        )));
    }
    let in_forget: std::collections::HashSet<usize> = forget.iter().cloned().collect();
    let retain: Vec<usize> = (0..n).filter(|i| !in_forget.contains(i)).collect();
    Ok(Partition {
        forget_indices: forget,
        retain_indices: retain,
        scenario: scenario.clone(),
    })
}

fn sample_without_replacement(rng: &mut ChaCha8Rng, pool: &[usize], k: usize) -> Vec<usize> {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let mut out: Vec<usize> = shuffled.into_iter().take(k).collect();
    out.sort_unstable();
    out
}

/// Stratified train/test split, deterministic per seed.
pub fn split_train_test(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction {test_fraction} outside (0, 1)"
        )));
    }
    dataset.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..dataset.num_classes() {
        let mut pool = dataset.class_indices(class);
        if pool.is_empty() {
            continue;
        }
        if pool.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "class {class} has fewer than 2 rows; cannot stratify"
            )));
        }
        pool.shuffle(&mut rng);
        let mut n_test = ((test_fraction * pool.len() as f64).floor() as usize).max(1);
        if n_test == pool.len() {
            n_test = pool.len() - 1;
        }
        test_idx.extend_from_slice(&pool[..n_test]);
        train_idx.extend_from_slice(&pool[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

/// Empirical mutual information (nats) between two discrete sequences.
pub fn empirical_mutual_information(xs: &[usize], ys: &[usize]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let kx = xs.iter().max().map_or(0, |&m| m + 1);
    let ky = ys.iter().max().map_or(0, |&m| m + 1);
    let mut joint = vec![0.0f64; kx * ky];
    let mut px = vec![0.0f64; kx];
    let mut py = vec![0.0f64; ky];
    for (&x, &y) in xs.iter().zip(ys) {
        joint[x * ky + y] += 1.0;
        px[x] += 1.0;
        py[y] += 1.0;
    }
    let mut mi = 0.0;
    for x in 0..kx {
        for y in 0..ky {
            let pxy = joint[x * ky + y] / n;
            if pxy > 0.0 {
                mi += pxy * (pxy / (px[x] / n * py[y] / n)).ln();
            }
        }
    }
    mi
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn toy_dataset(n: usize, k: usize) -> Dataset {
        let features = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        Dataset {
            features,
            labels,
            concept_of_class: (0..k).map(|c| c / 2).collect(),
            sensitive: Some((0..n).map(|i| (i % 3 == 0) as u8).collect()),
            background_id: None,
            feature_roles: None,
        }
    }

    #[test]
    fn uniform_deletion_counts() {
        let ds = toy_dataset(100, 4);
        let part = make_deletion(&ds, &Scenario::Uniform { p: 0.2 }, 7).unwrap();
        assert_eq!(part.forget_indices.len(), 20);
        assert_eq!(part.retain_indices.len(), 80);
        part.validate(100).unwrap();
    }

    #[test]
    fn full_class_deletion_removes_whole_class() {
        let ds = toy_dataset(40, 4);
        let part = make_deletion(&ds, &Scenario::FullClass { classes: vec![3] }, 0).unwrap();
        assert!(part.retain_indices.iter().all(|&i| ds.labels[i] != 3));
        assert!(part.forget_indices.iter().all(|&i| ds.labels[i] == 3));
        part.validate(40).unwrap();
    }

    #[test]
    fn selective_group_deletion_counts() {
        let ds = toy_dataset(90, 3);
        let unpriv: usize = ds.sensitive.as_ref().unwrap().iter().filter(|&&v| v == 0).count();
        let part = make_deletion(
            &ds,
            &Scenario::SelectiveGroup {
                attribute_value: 0,
                p: 0.3,
            },
            3,
        )
        .unwrap();
        assert_eq!(part.forget_indices.len(), (0.3 * unpriv as f64).floor() as usize);
        assert!(part
            .forget_indices
            .iter()
            .all(|&i| ds.sensitive.as_ref().unwrap()[i] == 0));
    }

    #[test]
    fn deletion_is_deterministic_per_seed() {
        let ds = toy_dataset(50, 5);
        let a = make_deletion(&ds, &Scenario::Uniform { p: 0.4 }, 11).unwrap();
        let b = make_deletion(&ds, &Scenario::Uniform { p: 0.4 }, 11).unwrap();
        assert_eq!(a.forget_indices, b.forget_indices);
        let c = make_deletion(&ds, &Scenario::Uniform { p: 0.4 }, 12).unwrap();
        assert_ne!(a.forget_indices, c.forget_indices);
    }

    #[test]
    fn empty_sides_are_rejected() {
        let ds = toy_dataset(10, 2);
        // floor(0.05 * 10) = 0 forget rows
        assert!(matches!(
            make_deletion(&ds, &Scenario::Uniform { p: 0.05 }, 0),
            Err(Error::EmptyPartition(_))
        ));
        // deleting every class empties the retain side
        assert!(matches!(
            make_deletion(&ds, &Scenario::FullClass { classes: vec![0, 1] }, 0),
            Err(Error::EmptyPartition(_))
        ));
    }

    #[test]
    fn invalid_fraction_rejected() {
        let ds = toy_dataset(10, 2);
        assert!(make_deletion(&ds, &Scenario::Uniform { p: 0.0 }, 0).is_err());
        assert!(make_deletion(&ds, &Scenario::Uniform { p: 1.2 }, 0).is_err());
    }

    #[test]
    fn stratified_split_counts() {
        let ds = toy_dataset(100, 10);
        let (train, test) = split_train_test(&ds, 0.2, 5).unwrap();
        assert_eq!(test.num_rows(), 20);
        assert_eq!(train.num_rows(), 80);
        for c in 0..10 {
            assert_eq!(test.class_indices(c).len(), 2, "class {c} test count");
        }
    }

    #[test]
    fn split_determinism_and_seed_sensitivity() {
        let ds = toy_dataset(60, 3);
        let (a_train, _) = split_train_test(&ds, 0.25, 9).unwrap();
        let (b_train, _) = split_train_test(&ds, 0.25, 9).unwrap();
        assert_eq!(a_train.labels, b_train.labels);
        assert_eq!(a_train.features, b_train.features);
        let (c_train, c_test) = split_train_test(&ds, 0.25, 10).unwrap();
        assert_ne!(a_train.features, c_train.features);
        // same per-class counts even with a different seed
        for c in 0..3 {
            assert_eq!(
                a_train.class_indices(c).len(),
                c_train.class_indices(c).len()
            );
        }
        assert_eq!(c_test.num_rows() + c_train.num_rows(), 60);
    }

    #[test]
    fn split_rejects_tiny_class() {
        let mut ds = toy_dataset(10, 2);
        // make class 1 a singleton
        ds.labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        assert!(split_train_test(&ds, 0.2, 0).is_err());
    }

    #[test]
    fn cf_targets_fall_back_to_all_other_classes_for_singletons() {
        let mut ds = toy_dataset(10, 2);
        ds.concept_of_class = vec![0, 1]; // singleton concepts
        assert_eq!(ds.cf_targets(0), vec![1]);
        let ds4 = toy_dataset(10, 4); // concepts {0:[0,1], 1:[2,3]}
        assert_eq!(ds4.cf_targets(0), vec![1]);
        assert_eq!(ds4.cf_targets(2), vec![3]);
    }

    #[test]
    fn mutual_information_of_independent_streams_is_small() {
        let xs: Vec<usize> = (0..10000).map(|i| i % 4).collect();
        let ys: Vec<usize> = (0..10000).map(|i| (i / 4) % 5).collect();
        let mi = empirical_mutual_information(&xs, &ys);
        assert!(mi < 0.01, "mi = {mi}");
    }
}
