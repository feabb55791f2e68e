//! Datasets: labeled points with train/validation/test tags and an OOD
//! flag per row.
//!
//! Validation rows are deliberately label-blind at the API level: the
//! only accessor for validation data returns features. Labels stay in
//! storage (and can be physically scrubbed) so the unsupervised parts
//! of the pipeline can be shown to behave identically either way.

mod csv_io;
mod generators;
mod imbalance;

pub use csv_io::{load_csv, load_export_csv};
pub use generators::{gen_far_field, gen_gaussian_classes, gen_ood_grid, gen_ring, gen_spiral};
pub use imbalance::{apply_imbalance, ImbalanceSpec};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Sentinel for a physically absent label.
const NO_LABEL: i64 = -1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    features: Array2<f64>,
    /// Stored labels; `NO_LABEL` marks scrubbed entries.
    labels: Vec<i64>,
    splits: Vec<Split>,
    ood: Vec<bool>,
    n_classes: usize,
}

impl Dataset {
    /// Builds an all-train, non-OOD dataset. The class count is the
    /// maximum label + 1.
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset must have at least one row".into()));
        }
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let n = labels.len();
        Ok(Dataset {
            features,
            labels: labels.into_iter().map(|l| l as i64).collect(),
            splits: vec![Split::Train; n],
            ood: vec![false; n],
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn split_of(&self, row: usize) -> Split {
        self.splits[row]
    }

    pub fn ood_flag(&self, row: usize) -> bool {
        self.ood[row]
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Largest feature-vector Euclidean norm over training rows; the
    /// far-field generators scale by this radius.
    pub fn train_radius(&self) -> f64 {
        self.rows_in(Split::Train)
            .into_iter()
            .map(|i| self.features.row(i).dot(&self.features.row(i)).sqrt())
            .fold(0.0, f64::max)
    }

    fn xy(&self, split: Split) -> Result<(Array2<f64>, Vec<usize>)> {
        let rows = self.rows_in(split);
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} split is empty",
                split.as_str()
            )));
        }
        let mut labels = Vec::with_capacity(rows.len());
        for &i in &rows {
            if self.labels[i] == NO_LABEL {
                return Err(Error::Schema(format!(
                    "row {i} in {} split has no label",
                    split.as_str()
                )));
            }
            labels.push(self.labels[i] as usize);
        }
        Ok((self.features.select(Axis(0), &rows), labels))
    }

    pub fn train_xy(&self) -> Result<(Array2<f64>, Vec<usize>)> {
        self.xy(Split::Train)
    }

    pub fn test_xy(&self) -> Result<(Array2<f64>, Vec<usize>)> {
        self.xy(Split::Test)
    }

    /// Validation rows as features only. Labels of validation rows are
    /// not reachable through the public API.
    pub fn validation_features(&self) -> Array2<f64> {
        let rows = self.rows_in(Split::Validation);
        self.features.select(Axis(0), &rows)
    }

    /// Physically removes validation labels from storage.
    pub fn scrub_validation_labels(&mut self) {
        for i in 0..self.len() {
            if self.splits[i] == Split::Validation {
                self.labels[i] = NO_LABEL;
            }
        }
    }

    /// Per-class row counts within a split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for i in 0..self.len() {
            if self.splits[i] == split && self.labels[i] != NO_LABEL {
                counts[self.labels[i] as usize] += 1;
            }
        }
        counts
    }

    /// Writes the dataset as CSV: x0..x{d-1}, label, split, ood.
    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        csv_io::save_csv(self, path)
    }

    pub(crate) fn from_parts(
        features: Array2<f64>,
        labels: Vec<i64>,
        splits: Vec<Split>,
        ood: Vec<bool>,
        n_classes: usize,
    ) -> Self {
        Dataset {
            features,
            labels,
            splits,
            ood,
            n_classes,
        }
    }

    /// Copy of the dataset holding only the rows the predicate keeps,
    /// in their original order. Class count is preserved even if a
    /// class loses all rows.
    pub(crate) fn retain_rows(&self, keep: impl Fn(usize) -> bool) -> Self {
        let kept: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let features = self.features.select(ndarray::Axis(0), &kept);
        let labels = kept.iter().map(|&i| self.labels[i]).collect();
        let splits = kept.iter().map(|&i| self.splits[i]).collect();
        let ood = kept.iter().map(|&i| self.ood[i]).collect();
        Dataset::from_parts(features, labels, splits, ood, self.n_classes)
    }

    pub(crate) fn raw_labels(&self) -> &[i64] {
        &self.labels
    }

    pub(crate) fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub(crate) fn ood_flags(&self) -> &[bool] {
        &self.ood
    }
}

/// Re-tags `floor(fraction * n_train)` uniformly chosen train rows as
/// validation. Labels stay in storage; the validation accessor exposes
/// features only.
pub fn split_validation(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in (0,1), got {fraction}"
        )));
    }
    let train_rows = ds.rows_in(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let n_val = (fraction * train_rows.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = train_rows;
    pool.shuffle(&mut rng);
    let mut out = ds.clone();
    for &row in pool.iter().take(n_val) {
        out.splits[row] = Split::Validation;
    }
    Ok(out)
}

/// Re-tags a fraction of train rows as test, stratified per class so
/// class proportions survive the split. Counts are floored per class.
pub fn split_test(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0,1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for class in 0..ds.n_classes {
        let mut rows: Vec<usize> = ds
            .rows_in(Split::Train)
            .into_iter()
            .filter(|&i| ds.labels[i] == class as i64)
            .collect();
        let n_test = (fraction * rows.len() as f64).floor() as usize;
        rows.shuffle(&mut rng);
        for &row in rows.iter().take(n_test) {
            out.splits[row] = Split::Test;
        }
    }
    Ok(out)
}
