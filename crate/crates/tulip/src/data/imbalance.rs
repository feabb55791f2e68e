//! Class-imbalance perturbation: thin out the train rows of one class
//! subset and the test rows of a disjoint subset.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, Split};

/// Which classes lose rows and by how much. Empty subsets leave the
/// dataset untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub class_subset_a: Vec<usize>,
    pub class_subset_b: Vec<usize>,
    pub train_reduction: f64,
    pub test_reduction: f64,
}

impl ImbalanceSpec {
    pub fn new(
        class_subset_a: Vec<usize>,
        class_subset_b: Vec<usize>,
        train_reduction: f64,
        test_reduction: f64,
    ) -> Result<Self> {
        let spec = Self { class_subset_a, class_subset_b, train_reduction, test_reduction };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train_reduction", self.train_reduction), ("test_reduction", self.test_reduction)] {
            if !(0.0..=1.0).contains(&r) || !r.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {r}"
                )));
            }
        }
        let a: BTreeSet<usize> = self.class_subset_a.iter().copied().collect();
        let b: BTreeSet<usize> = self.class_subset_b.iter().copied().collect();
        if let Some(shared) = a.intersection(&b).next() {
            return Err(Error::InvalidArgument(format!(
                "class subsets overlap on class {shared}"
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.class_subset_a.is_empty() && self.class_subset_b.is_empty()
    }

    /// Severity in [0, 1] maps to the fraction of classes affected:
    /// the first half of 2*round(severity*K/2) classes joins the
    /// train-reduced subset, the second half the test-reduced one.
    /// Severity 0 (or too few classes) yields the identity spec.
    pub fn for_severity(
        severity: f64,
        n_classes: usize,
        train_reduction: f64,
        test_reduction: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) || !severity.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "severity must lie in [0, 1], got {severity}"
            )));
        }
        let half = (severity * n_classes as f64 / 2.0).round() as usize;
        let half = half.min(n_classes / 2);
        Self::new(
            (0..half).collect(),
            (half..2 * half).collect(),
            train_reduction,
            test_reduction,
        )
    }
}

/// Removes floor(reduction * n) rows uniformly without replacement
/// from the train rows of each class in A and the test rows of each
/// class in B. Everything else is untouched and row order is
/// preserved.
pub fn apply_imbalance(ds: &Dataset, spec: &ImbalanceSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(ds.clone());
    }
    for &class in spec.class_subset_a.iter().chain(&spec.class_subset_b) {
        if class >= ds.n_classes() {
            return Err(Error::InvalidArgument(format!(
                "imbalance names class {class} but the dataset has {} classes",
                ds.n_classes()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remove = vec![false; ds.len()];
    let mut buckets: Vec<(BTreeSet<usize>, Split, f64)> = vec![
        (
            spec.class_subset_a.iter().copied().collect(),
            Split::Train,
            spec.train_reduction,
        ),
        (
            spec.class_subset_b.iter().copied().collect(),
            Split::Test,
            spec.test_reduction,
        ),
    ];
    for (classes, split, reduction) in buckets.drain(..) {
        // Fixed ascending class order keeps the row draws a pure
        // function of (dataset, spec, seed).
        for class in classes {
            let rows: Vec<usize> = (0..ds.len())
                .filter(|&i| {
                    ds.split_of(i) == split && ds.raw_labels()[i] == class as i64
                })
                .collect();
            let n_remove = (reduction * rows.len() as f64).floor() as usize;
            if n_remove == 0 {
                continue;
            }
            let picks = rand::seq::index::sample(&mut rng, rows.len(), n_remove);
            for p in picks.iter() {
                remove[rows[p]] = true;
            }
        }
    }
    Ok(ds.retain_rows(|i| !remove[i]))
}
