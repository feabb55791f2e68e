//! Gaussian-process output heads approximated with random Fourier
//! features, plus the evidential uncertainty score read off their
//! logits.
//!
//! A head maps an `in_dim`-wide representation h to K logits through a
//! fixed random feature expansion Phi(h) = sqrt(2/D) cos(h W^T + b) and
//! a trained weight matrix beta. The random weights approximate an RBF
//! kernel of the configured length scale; only beta trains. After
//! training, one Laplace pass over the training features fits a shared
//! precision matrix, and inference divides each logit vector by
//! sqrt(1 + lambda * variance), shrinking predictions toward uniform
//! where the head has seen no data.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spd_inverse;

/// Hyperparameters for one GP head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpConfig {
    /// Random-feature dimension D.
    pub rff_dim: usize,
    /// RBF kernel length scale.
    pub length_scale: f64,
    /// Ridge term added to the Laplace precision.
    pub ridge: f64,
    /// Mean-field logit adjustment strength.
    pub mean_field_lambda: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            rff_dim: 128,
            length_scale: 2.0,
            ridge: 1.0,
            mean_field_lambda: std::f64::consts::PI / 8.0,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rff_dim == 0 {
            return Err(Error::InvalidArgument("rff_dim must be positive".into()));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "length_scale must be positive and finite, got {}",
                self.length_scale
            )));
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ridge must be positive and finite, got {}",
                self.ridge
            )));
        }
        if !(self.mean_field_lambda >= 0.0 && self.mean_field_lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mean_field_lambda must be nonnegative, got {}",
                self.mean_field_lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpHead {
    /// Fixed random projection `[D x in_dim]`, entries N(0, 1)/length_scale.
    rff_weights: Array2<f64>,
    /// Fixed random phases `[D]`, uniform in [0, 2pi).
    rff_phase: Array1<f64>,
    /// Trained output weights `[K x D]`.
    pub beta: Array2<f64>,
    /// Shared Laplace precision `[D x D]`; ridge * I until a Laplace
    /// pass runs.
    precision: Array2<f64>,
    /// Cached inverse of `precision`.
    covariance: Array2<f64>,
    ridge: f64,
    mean_field_lambda: f64,
}

/// Cache from a tracing feature expansion: the features and the sine
/// values backward needs.
pub(crate) struct RffTrace {
    pub phi: Array2<f64>,
    sin: Array2<f64>,
}

impl GpHead {
    pub fn new(in_dim: usize, n_classes: usize, config: &GpConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 {
            return Err(Error::InvalidArgument("head input width must be positive".into()));
        }
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "head needs at least two classes, got {n_classes}"
            )));
        }
        let d = config.rff_dim;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let rff_weights =
            Array2::from_shape_fn((d, in_dim), |_| normal.sample(rng) / config.length_scale);
        let rff_phase = Array1::from_shape_fn(d, |_| rng.gen_range(0.0..std::f64::consts::TAU));
        let limit = (6.0 / d as f64).sqrt();
        let beta = Array2::from_shape_fn((n_classes, d), |_| rng.gen_range(-limit..limit));
        let precision = Array2::eye(d) * config.ridge;
        let covariance = Array2::eye(d) / config.ridge;
        Ok(GpHead {
            rff_weights,
            rff_phase,
            beta,
            precision,
            covariance,
            ridge: config.ridge,
            mean_field_lambda: config.mean_field_lambda,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.rff_weights.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.beta.nrows()
    }

    pub fn rff_dim(&self) -> usize {
        self.rff_weights.nrows()
    }

    pub fn precision(&self) -> &Array2<f64> {
        &self.precision
    }

    fn check_input(&self, h: &ArrayView2<f64>) -> Result<()> {
        if h.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} input features, got {}",
                self.in_dim(),
                h.ncols()
            )));
        }
        Ok(())
    }

    /// Random Fourier features Phi = sqrt(2/D) cos(h W^T + b), `[n x D]`.
    pub fn rff_features(&self, h: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.rff_trace(h)?.phi)
    }

    pub(crate) fn rff_trace(&self, h: &ArrayView2<f64>) -> Result<RffTrace> {
        self.check_input(h)?;
        let scale = (2.0 / self.rff_dim() as f64).sqrt();
        let arg = h.dot(&self.rff_weights.t()) + &self.rff_phase;
        let phi = arg.mapv(|a| scale * a.cos());
        let sin = arg.mapv(f64::sin);
        Ok(RffTrace { phi, sin })
    }

    /// Raw logits g = Phi beta^T for precomputed features.
    pub fn logits_from_features(&self, phi: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if phi.ncols() != self.rff_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} vs rff_dim {}",
                phi.ncols(),
                self.rff_dim()
            )));
        }
        Ok(phi.dot(&self.beta.t()))
    }

    /// Raw (unadjusted) logits for head inputs.
    pub fn logits_raw(&self, h: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let phi = self.rff_features(h)?;
        self.logits_from_features(&phi.view())
    }

    /// Backward through the head given upstream logit gradients.
    /// Returns (dbeta, dh).
    pub(crate) fn backward(
        &self,
        h: &ArrayView2<f64>,
        trace: &RffTrace,
        dlogits: &ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dbeta = dlogits.t().dot(&trace.phi);
        let dphi = dlogits.dot(&self.beta);
        let scale = (2.0 / self.rff_dim() as f64).sqrt();
        // dPhi/darg = -scale * sin(arg); darg/dh = W.
        let darg = (&dphi * &trace.sin).mapv(|v| -scale * v);
        let dh = darg.dot(&self.rff_weights);
        let _ = h;
        (dbeta, dh)
    }

    /// Fits the shared Laplace precision from training features and the
    /// matching predictive probabilities:
    /// precision = ridge * I + sum_i pbar_i (1 - pbar_i) Phi_i Phi_i^T
    /// with pbar_i the max-class probability of row i. An empty batch
    /// resets the precision to ridge * I.
    pub fn laplace_update(&mut self, phi: &ArrayView2<f64>, probs: &ArrayView2<f64>) -> Result<()> {
        let d = self.rff_dim();
        if phi.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} vs rff_dim {d}",
                phi.ncols()
            )));
        }
        if probs.nrows() != phi.nrows() || probs.ncols() != self.n_classes() {
            return Err(Error::ShapeMismatch(format!(
                "probability matrix {}x{} vs {} rows and {} classes",
                probs.nrows(),
                probs.ncols(),
                phi.nrows(),
                self.n_classes()
            )));
        }
        let mut precision = Array2::eye(d) * self.ridge;
        for (row, p) in phi.rows().into_iter().zip(probs.rows()) {
            let pbar = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weight = pbar * (1.0 - pbar);
            if weight == 0.0 {
                continue;
            }
            // Rank-one update: precision += weight * row row^T.
            for i in 0..d {
                let wi = weight * row[i];
                if wi == 0.0 {
                    continue;
                }
                for j in 0..d {
                    precision[[i, j]] += wi * row[j];
                }
            }
        }
        self.covariance = spd_inverse(&precision.view())?;
        self.precision = precision;
        Ok(())
    }

    /// Per-sample predictive variance sigma^2 = phi^T precision^-1 phi.
    pub fn variances(&self, phi: &ArrayView2<f64>) -> Result<Array1<f64>> {
        if phi.ncols() != self.rff_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} vs rff_dim {}",
                phi.ncols(),
                self.rff_dim()
            )));
        }
        let proj = phi.dot(&self.covariance);
        Ok(proj
            .rows()
            .into_iter()
            .zip(phi.rows())
            .map(|(a, b)| a.dot(&b))
            .collect())
    }

    /// Mean-field adjusted logits g / sqrt(1 + lambda * sigma^2). The
    /// shared per-sample factor preserves each row's argmax.
    pub fn predict_adjusted(&self, h: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let phi = self.rff_features(h)?;
        let mut logits = self.logits_from_features(&phi.view())?;
        let vars = self.variances(&phi.view())?;
        for (mut row, &var) in logits.rows_mut().into_iter().zip(vars.iter()) {
            let factor = 1.0 / (1.0 + self.mean_field_lambda * var).sqrt();
            row.mapv_inplace(|g| g * factor);
        }
        Ok(logits)
    }
}

/// Evidential uncertainty from one logit vector:
/// u = K / (K + sum_k exp(g_k)), computed in log space and saturated
/// into the open interval (0, 1) so extreme logits cannot overflow.
pub fn dempster_shafer(logits: &ArrayView1<f64>) -> f64 {
    let k = logits.len() as f64;
    let lse = crate::nn::logsumexp(logits);
    // Branch on the sign of lse so neither exp can overflow: the sum of
    // exponentials only ever appears as exp(lse) with lse <= 0 or as
    // exp(ln k - lse) with lse > 0.
    let u = if lse <= 0.0 {
        k / (k + lse.exp())
    } else {
        let t = (k.ln() - lse).exp();
        t / (t + 1.0)
    };
    u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// Evidential uncertainty per row.
pub fn dempster_shafer_batch(logits: &ArrayView2<f64>) -> Array1<f64> {
    logits
        .rows()
        .into_iter()
        .map(|row| dempster_shafer(&row))
        .collect()
}
