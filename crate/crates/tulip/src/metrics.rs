//! Evaluation metrics: accuracy, separability of uncertainty scores
//! (AUROC), calibration (ECE), and accuracy/count surfaces over an
//! imbalance-severity sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which uncertainty estimator produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    SoftmaxEntropy,
    Energy,
    EnsembleTotal,
    EnsembleDisagreement,
    McDropout,
    Sngp,
    Tulip,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::SoftmaxEntropy,
        EstimatorKind::Energy,
        EstimatorKind::EnsembleTotal,
        EstimatorKind::EnsembleDisagreement,
        EstimatorKind::McDropout,
        EstimatorKind::Sngp,
        EstimatorKind::Tulip,
    ];
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            EstimatorKind::SoftmaxEntropy => "softmax_entropy",
            EstimatorKind::Energy => "energy",
            EstimatorKind::EnsembleTotal => "ensemble_total",
            EstimatorKind::EnsembleDisagreement => "ensemble_disagreement",
            EstimatorKind::McDropout => "mc_dropout",
            EstimatorKind::Sngp => "sngp",
            EstimatorKind::Tulip => "tulip",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| {
                let names: Vec<String> = EstimatorKind::ALL.iter().map(|k| k.to_string()).collect();
                Error::InvalidArgument(format!(
                    "unknown estimator `{s}`, expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

fn check_finite(name: &str, scores: &[f64]) -> Result<()> {
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "{name} scores contain NaN"
        )));
    }
    Ok(())
}

/// Probability that a random OOD score exceeds a random in-distribution
/// score, ties counted half. Computed via midranks in O(n log n); the
/// rank-sum identity makes it exactly the pairwise average because all
/// intermediate values are multiples of one half.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::InvalidArgument(
            "auroc needs nonempty score sets on both sides".into(),
        ));
    }
    check_finite("in-distribution", scores_id)?;
    check_finite("out-of-distribution", scores_ood)?;
    let n_id = scores_id.len();
    let n_ood = scores_ood.len();
    // (score, is_ood) sorted by score; tied runs get their midrank.
    let mut all: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, false))
        .chain(scores_ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN after check"));
    let mut rank_sum_ood = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; a tied run [i, j) shares the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_ood += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_ood - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Right-closed equal-width bin index on [0, 1]: value 0 falls in the
/// first bin, value 1 in the last.
fn bin_index(t: f64, n_bins: usize) -> usize {
    let raw = (t * n_bins as f64).ceil() as isize - 1;
    raw.clamp(0, n_bins as isize - 1) as usize
}

/// Expected calibration error: sum over equal-width confidence bins of
/// (bin weight) * |bin accuracy - bin mean confidence|.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} confidences vs {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::InvalidArgument("ece needs at least one sample".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    for &c in confidences {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!(
                "confidence {c} outside [0, 1]"
            )));
        }
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut hit_sum = vec![0.0f64; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += if ok { 1.0 } else { 0.0 };
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        total += (nb / n) * (hit_sum[b] / nb - conf_sum[b] / nb).abs();
    }
    Ok(total)
}

/// Fraction of matching labels.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(
            "accuracy needs at least one sample".into(),
        ));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Accuracy and sample-concentration surfaces over (severity,
/// uncertainty-bin) cells. Bins are per-severity equal-width over that
/// severity's own score range; `accuracy_cells` holds `None` for empty
/// cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub severity_axis: Vec<f64>,
    /// Per-severity bin edges, `n_bins + 1` entries per row.
    pub bin_edges: Vec<Vec<f64>>,
    pub accuracy_cells: Vec<Vec<Option<f64>>>,
    pub count_cells: Vec<Vec<usize>>,
}

pub fn surface_bins(
    severities: &[f64],
    uncertainties: &[f64],
    correct: &[bool],
    n_bins: usize,
) -> Result<SurfaceGrid> {
    if severities.len() != uncertainties.len() || severities.len() != correct.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} severities, {} uncertainties, {} outcomes",
            severities.len(),
            uncertainties.len(),
            correct.len()
        )));
    }
    if severities.is_empty() {
        return Err(Error::InvalidArgument(
            "surface needs at least one sample".into(),
        ));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("surface needs at least one bin".into()));
    }
    check_finite("severity", severities)?;
    check_finite("uncertainty", uncertainties)?;
    let mut axis: Vec<f64> = severities.to_vec();
    axis.sort_by(|a, b| a.partial_cmp(b).expect("no NaN after check"));
    axis.dedup();
    let mut grid = SurfaceGrid {
        severity_axis: axis.clone(),
        bin_edges: Vec::with_capacity(axis.len()),
        accuracy_cells: Vec::with_capacity(axis.len()),
        count_cells: Vec::with_capacity(axis.len()),
    };
    for &sev in &axis {
        let idx: Vec<usize> = (0..severities.len())
            .filter(|&i| severities[i] == sev)
            .collect();
        let lo = idx.iter().map(|&i| uncertainties[i]).fold(f64::INFINITY, f64::min);
        let hi = idx
            .iter()
            .map(|&i| uncertainties[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let edges: Vec<f64> = (0..=n_bins)
            .map(|b| lo + span * b as f64 / n_bins as f64)
            .collect();
        let mut counts = vec![0usize; n_bins];
        let mut hits = vec![0.0f64; n_bins];
        for &i in &idx {
            // A degenerate range (all scores equal) puts everything in
            // the first bin.
            let b = if span > 0.0 {
                bin_index((uncertainties[i] - lo) / span, n_bins)
            } else {
                0
            };
            counts[b] += 1;
            hits[b] += if correct[i] { 1.0 } else { 0.0 };
        }
        let acc: Vec<Option<f64>> = (0..n_bins)
            .map(|b| {
                if counts[b] == 0 {
                    None
                } else {
                    Some(hits[b] / counts[b] as f64)
                }
            })
            .collect();
        grid.bin_edges.push(edges);
        grid.accuracy_cells.push(acc);
        grid.count_cells.push(counts);
    }
    Ok(grid)
}

impl SurfaceGrid {
    pub fn n_bins(&self) -> usize {
        self.count_cells.first().map_or(0, Vec::len)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// One row per (severity, bin) cell; empty cells leave the
    /// accuracy field blank.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "severity,bin,lower_edge,upper_edge,count,accuracy")?;
        for (s, &sev) in self.severity_axis.iter().enumerate() {
            for b in 0..self.n_bins() {
                let acc = match self.accuracy_cells[s][b] {
                    Some(a) => format!("{a}"),
                    None => String::new(),
                };
                writeln!(
                    out,
                    "{sev},{b},{},{},{},{acc}",
                    self.bin_edges[s][b],
                    self.bin_edges[s][b + 1],
                    self.count_cells[s][b],
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Headline evaluation numbers for one trained estimator on one
/// dataset. `auroc` averages `auroc_by_ood` when several OOD sets are
/// evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub estimator: EstimatorKind,
    pub accuracy: f64,
    pub auroc: f64,
    pub ece: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub auroc_by_ood: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// metric,value rows; per-OOD-set AUROCs appear as
    /// `auroc.<set name>`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "metric,value")?;
        writeln!(out, "estimator,{}", self.estimator)?;
        writeln!(out, "accuracy,{}", self.accuracy)?;
        writeln!(out, "auroc,{}", self.auroc)?;
        writeln!(out, "ece,{}", self.ece)?;
        writeln!(out, "n_id,{}", self.n_id)?;
        writeln!(out, "n_ood,{}", self.n_ood)?;
        for (name, value) in &self.auroc_by_ood {
            writeln!(out, "auroc.{name},{value}")?;
        }
        out.flush()?;
        Ok(())
    }
}
