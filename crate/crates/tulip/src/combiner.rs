//! Combination head: turns the per-exit uncertainty scores into one
//! number. The head is fitted on validation features alone; prediction
//! switches between consecutive exits provide the proxy labels for a
//! logistic regression whose (clamped) weights drive a weighted mean.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::dempster_shafer_batch;
use crate::linalg::solve;
use crate::sdn::{argmax_rows, SdnModel, SwitchScope};

/// Direction of the switch-count threshold. The default reads many
/// switches as high uncertainty; `PaperLiteral` keeps the literal
/// inequality (label 1 iff the count stays under the threshold).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchPolarity {
    #[default]
    SwitchesHighUncertain,
    PaperLiteral,
}

/// Per-exit uncertainty scores for a single input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyProfile(pub Vec<f64>);

impl UncertaintyProfile {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::InvalidArgument("empty uncertainty profile".into()));
        }
        for &u in &v {
            if !(u > 0.0 && u < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "profile component {u} outside (0, 1)"
                )));
            }
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Fitted weighting of the internal classifiers' uncertainty scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationHead {
    /// Nonnegative weights, one per internal classifier.
    pub r: Vec<f64>,
    /// Switch-count threshold used for the proxy labels.
    pub n_s: usize,
    pub polarity: SwitchPolarity,
    /// True when the fit produced no usable weights and scoring falls
    /// back to the plain mean.
    pub fallback_equal: bool,
}

impl CombinationHead {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let head: CombinationHead = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if head.r.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Schema("combination weights must be nonnegative".into()));
        }
        Ok(head)
    }
}

/// Uncertainty score of every internal classifier for every row:
/// matrix [n x N_IC], column order = tap order. Final head excluded.
pub fn ic_uncertainty_profiles(model: &SdnModel, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let exits = model.exit_logits(x)?;
    let n_ic = model.n_ic();
    let mut out = Array2::<f64>::zeros((x.nrows(), n_ic));
    for (i, exit) in exits[..n_ic].iter().enumerate() {
        let scores = dempster_shafer_batch(&exit.view());
        out.column_mut(i).assign(&scores);
    }
    Ok(out)
}

fn max_switches(model: &SdnModel, scope: SwitchScope) -> usize {
    match scope {
        SwitchScope::IcsOnly => model.n_ic().saturating_sub(1),
        SwitchScope::IncludeFinal => model.n_ic(),
    }
}

/// Binary proxy labels from switch counts; consumes only the feature
/// rows, never labels. Under the default polarity, label 1 marks
/// switch counts of at least `n_s`.
pub fn proxy_labels(
    model: &SdnModel,
    x_val: &ArrayView2<f64>,
    n_s: usize,
    polarity: SwitchPolarity,
    scope: SwitchScope,
) -> Result<Vec<bool>> {
    let upper = max_switches(model, scope) + 1;
    if n_s < 1 || n_s > upper {
        return Err(Error::InvalidArgument(format!(
            "switch threshold {n_s} outside [1, {upper}]"
        )));
    }
    let switches = model.prediction_switches(x_val, scope)?;
    Ok(switches
        .iter()
        .map(|&s| match polarity {
            SwitchPolarity::SwitchesHighUncertain => s >= n_s,
            SwitchPolarity::PaperLiteral => s < n_s,
        })
        .collect())
}

/// Round-half-up of the mean switch count, clamped to the usable
/// threshold range (at least 1, at most the maximum possible count).
pub(crate) fn ns_from_mean(mean: f64, max_switches: usize) -> usize {
    let rounded = mean.round() as usize;
    rounded.clamp(1, max_switches.max(1))
}

/// Threshold choice: the average number of switches over the
/// validation rows, rounded half up and clamped.
pub fn choose_ns(model: &SdnModel, x_val: &ArrayView2<f64>, scope: SwitchScope) -> Result<usize> {
    if x_val.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "threshold choice needs a nonempty validation set".into(),
        ));
    }
    let switches = model.prediction_switches(x_val, scope)?;
    let mean = switches.iter().sum::<usize>() as f64 / switches.len() as f64;
    Ok(ns_from_mean(mean, max_switches(model, scope)))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// L2-regularized logistic regression weights (intercept fitted but
/// reported separately and unregularized).
#[derive(Debug, Clone, PartialEq)]
pub struct LrFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

/// Newton optimization of the regularized Bernoulli log-likelihood to
/// gradient norm < 1e-8. Deterministic: zero initialization, step
/// halving on objective increase.
pub fn fit_lr(profiles: &ArrayView2<f64>, labels: &[bool], l2: f64) -> Result<LrFit> {
    let n = profiles.nrows();
    let m = profiles.ncols();
    if n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} profiles vs {} labels",
            labels.len()
        )));
    }
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty regression problem".into()));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "regularization strength must be nonnegative, got {l2}"
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == n {
        return Err(Error::DegenerateLabels(format!(
            "all {n} proxy labels are {}",
            positives != 0
        )));
    }
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    // theta = [w_0..w_{m-1}, b].
    let mut theta = vec![0.0f64; m + 1];
    let objective = |theta: &[f64]| -> f64 {
        let (w, b) = (&theta[..m], theta[m]);
        let mut nll = 0.0;
        for i in 0..n {
            let z: f64 = profiles.row(i).iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            nll += softplus(z) - y[i] * z;
        }
        nll + 0.5 * l2 * w.iter().map(|wi| wi * wi).sum::<f64>()
    };
    let mut value = objective(&theta);
    for _ in 0..200 {
        // Gradient and Hessian of the penalized NLL.
        let mut grad = vec![0.0f64; m + 1];
        let mut hess = Array2::<f64>::zeros((m + 1, m + 1));
        for i in 0..n {
            let row = profiles.row(i);
            let z: f64 =
                row.iter().zip(&theta[..m]).map(|(x, wi)| x * wi).sum::<f64>() + theta[m];
            let p = sigmoid(z);
            let resid = p - y[i];
            // Curvature floor keeps the system solvable when the fit
            // saturates.
            let s = (p * (1.0 - p)).max(1e-12);
            for a in 0..m {
                grad[a] += row[a] * resid;
                for b in a..m {
                    hess[[a, b]] += s * row[a] * row[b];
                }
                hess[[a, m]] += s * row[a];
            }
            grad[m] += resid;
            hess[[m, m]] += s;
        }
        for a in 0..m {
            grad[a] += l2 * theta[a];
            hess[[a, a]] += l2;
            for b in a + 1..m {
                hess[[b, a]] = hess[[a, b]];
            }
            hess[[m, a]] = hess[[a, m]];
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-8 {
            return Ok(LrFit {
                weights: theta[..m].to_vec(),
                intercept: theta[m],
            });
        }
        let neg_grad = Array1::from_iter(grad.iter().map(|g| -g));
        let delta = solve(&hess.view(), &neg_grad.view())
            .map_err(|e| Error::Numeric(format!("logistic fit step failed: {e}")))?;
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = theta
                .iter()
                .zip(delta.iter())
                .map(|(t, d)| t + alpha * d)
                .collect();
            let trial_value = objective(&trial);
            if trial_value <= value + 1e-12 || alpha < 1e-8 {
                theta = trial;
                value = trial_value;
                break;
            }
            alpha /= 2.0;
        }
    }
    Err(Error::Numeric(
        "logistic fit did not converge within the iteration budget".into(),
    ))
}

/// Fits the full combination head on validation features: chooses the
/// switch threshold (unless given), derives proxy labels, fits the
/// logistic weights, clamps negatives to zero. Degenerate proxy labels
/// or an all-zero clamp engage the equal-weight fallback.
pub fn fit_combination_head(
    model: &SdnModel,
    x_val: &ArrayView2<f64>,
    n_s: Option<usize>,
    polarity: SwitchPolarity,
    scope: SwitchScope,
    l2: f64,
) -> Result<CombinationHead> {
    let n_s = match n_s {
        Some(v) => v,
        None => choose_ns(model, x_val, scope)?,
    };
    let labels = proxy_labels(model, x_val, n_s, polarity, scope)?;
    let profiles = ic_uncertainty_profiles(model, x_val)?;
    match fit_lr(&profiles.view(), &labels, l2) {
        Ok(fit) => {
            let r: Vec<f64> = fit.weights.iter().map(|&w| w.max(0.0)).collect();
            let fallback_equal = r.iter().all(|&w| w == 0.0);
            Ok(CombinationHead { r, n_s, polarity, fallback_equal })
        }
        Err(Error::DegenerateLabels(_)) => Ok(CombinationHead {
            r: vec![1.0; model.n_ic()],
            n_s,
            polarity,
            fallback_equal: true,
        }),
        Err(e) => Err(e),
    }
}

/// Weighted mean of the profile under the head's weights; plain mean
/// when the fallback is engaged.
pub fn combined_uncertainty(head: &CombinationHead, v: &[f64]) -> f64 {
    debug_assert_eq!(head.r.len(), v.len());
    if head.fallback_equal {
        return v.iter().sum::<f64>() / v.len() as f64;
    }
    let total: f64 = head.r.iter().sum();
    head.r.iter().zip(v).map(|(r, u)| r * u).sum::<f64>() / total
}

/// Final-exit predictions plus the combined uncertainty per row, from
/// one backbone pass.
pub fn predict_with_uncertainty(
    model: &SdnModel,
    head: &CombinationHead,
    x: &ArrayView2<f64>,
) -> Result<(Vec<usize>, Array1<f64>)> {
    if head.r.len() != model.n_ic() {
        return Err(Error::ShapeMismatch(format!(
            "head carries {} weights, model has {} internal classifiers",
            head.r.len(),
            model.n_ic()
        )));
    }
    let exits = model.exit_logits(x)?;
    let labels = argmax_rows(&exits[model.n_ic()]);
    let mut scores = Array2::<f64>::zeros((x.nrows(), model.n_ic()));
    for (i, exit) in exits[..model.n_ic()].iter().enumerate() {
        scores.column_mut(i).assign(&dempster_shafer_batch(&exit.view()));
    }
    let u = Array1::from_iter(
        scores
            .rows()
            .into_iter()
            .map(|row| combined_uncertainty(head, row.as_slice().unwrap())),
    );
    Ok((labels, u))
}

/// Single score for arbitrary inputs (Alg. convenience wrapper).
pub fn tulip_uncertainty(
    model: &SdnModel,
    head: &CombinationHead,
    x: &ArrayView2<f64>,
) -> Result<Array1<f64>> {
    Ok(predict_with_uncertainty(model, head, x)?.1)
}
