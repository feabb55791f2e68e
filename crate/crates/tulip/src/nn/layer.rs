//! Layer types: dense, residual block, dropout.
//!
//! Layers are plain data plus forward/backward methods. Forward methods
//! return the values the matching backward needs, so gradient code never
//! recomputes activations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Spectral-normalization state attached to a dense layer: the target
/// coefficient and the persistent power-iteration vector (dimension =
/// layer output width).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralState {
    pub coefficient: f64,
    pub u: Array1<f64>,
}

/// Fully-connected layer: y = activation(x W^T + b), weights stored
/// `[out x in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub spectral: Option<SpectralState>,
}

/// Cache of one dense forward pass.
pub(crate) struct DenseCache {
    pub input: Array2<f64>,
    pub pre_activation: Array2<f64>,
}

/// Gradients for one dense layer.
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        DenseGrad {
            dw: Array2::zeros(layer.weights.raw_dim()),
            db: Array1::zeros(layer.bias.raw_dim()),
        }
    }
}

impl DenseLayer {
    /// He-uniform initialization: weights uniform in
    /// (-sqrt(6/in), sqrt(6/in)), bias zero.
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "layer dimensions must be positive");
        let limit = (6.0 / in_dim as f64).sqrt();
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-limit..limit));
        DenseLayer {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
            spectral: None,
        }
    }

    /// Enables spectral normalization with the given coefficient. The
    /// persistent power-iteration vector starts as a deterministic draw.
    pub fn with_spectral_norm(mut self, coefficient: f64, rng: &mut ChaCha8Rng) -> Self {
        let out = self.weights.nrows();
        let mut u: Array1<f64> = Array1::from_shape_fn(out, |_| rng.gen_range(-1.0..1.0));
        let norm = u.dot(&u).sqrt();
        if norm > 0.0 {
            u /= norm;
        } else {
            u[0] = 1.0;
        }
        self.spectral = Some(SpectralState {
            coefficient,
            u,
        });
        self
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub(crate) fn forward(&self, x: &ArrayView2<f64>) -> (DenseCache, Array2<f64>) {
        let pre = x.dot(&self.weights.t()) + &self.bias;
        let out = pre.mapv(|z| self.activation.apply(z));
        (
            DenseCache {
                input: x.to_owned(),
                pre_activation: pre,
            },
            out,
        )
    }

    /// Backward through the layer. `dy` is the gradient w.r.t. the layer
    /// output; returns the gradient w.r.t. the input and fills `grad`.
    pub(crate) fn backward(&self, cache: &DenseCache, dy: &ArrayView2<f64>, grad: &mut DenseGrad) -> Array2<f64> {
        let mut dz = dy.to_owned();
        dz.zip_mut_with(&cache.pre_activation, |g, &z| {
            *g *= self.activation.derivative(z);
        });
        grad.dw += &dz.t().dot(&cache.input);
        grad.db += &dz.sum_axis(Axis(0));
        dz.dot(&self.weights)
    }
}

/// Residual block y = x + g(x) where g is a stack of dense layers with
/// matching input/output width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub inner: Vec<DenseLayer>,
}

impl ResidualBlock {
    pub fn new(inner: Vec<DenseLayer>) -> Result<Self> {
        if inner.is_empty() {
            return Err(Error::InvalidArgument(
                "residual block needs at least one inner layer".into(),
            ));
        }
        let in_dim = inner[0].in_dim();
        let out_dim = inner.last().unwrap().out_dim();
        if in_dim != out_dim {
            return Err(Error::ShapeMismatch(format!(
                "residual block must preserve width, got {in_dim} in vs {out_dim} out"
            )));
        }
        for pair in inner.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "residual inner widths do not chain: {} vs {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(ResidualBlock { inner })
    }

    pub fn width(&self) -> usize {
        self.inner[0].in_dim()
    }

    pub(crate) fn forward(&self, x: &ArrayView2<f64>) -> (Vec<DenseCache>, Array2<f64>) {
        let mut caches = Vec::with_capacity(self.inner.len());
        let mut h = x.to_owned();
        for layer in &self.inner {
            let (cache, out) = layer.forward(&h.view());
            caches.push(cache);
            h = out;
        }
        (caches, h + x)
    }

    pub(crate) fn backward(
        &self,
        caches: &[DenseCache],
        dy: &ArrayView2<f64>,
        grads: &mut [DenseGrad],
    ) -> Array2<f64> {
        let mut d = dy.to_owned();
        for (layer, (cache, grad)) in self
            .inner
            .iter()
            .zip(caches.iter().zip(grads.iter_mut()))
            .rev()
        {
            d = layer.backward(cache, &d.view(), grad);
        }
        d + dy
    }
}

/// Inverted dropout: train mode zeroes each entry with probability
/// `rate` and scales survivors by 1/(1-rate); eval mode is the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropoutLayer {
    pub rate: f64,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(DropoutLayer { rate })
    }

    /// Samples the scaled keep-mask for one batch.
    pub(crate) fn sample_mask(&self, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        Array2::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Dense(DenseLayer),
    Residual(ResidualBlock),
    Dropout(DropoutLayer),
}

impl Layer {
    /// Number of trainable dense slots inside this layer.
    pub(crate) fn dense_slots(&self) -> usize {
        match self {
            Layer::Dense(_) => 1,
            Layer::Residual(block) => block.inner.len(),
            Layer::Dropout(_) => 0,
        }
    }

    /// Output width given an input width, or an error if they clash.
    pub(crate) fn out_dim(&self, in_dim: usize) -> Result<usize> {
        match self {
            Layer::Dense(d) => {
                if d.in_dim() != in_dim {
                    Err(Error::ShapeMismatch(format!(
                        "dense layer expects width {}, got {in_dim}",
                        d.in_dim()
                    )))
                } else {
                    Ok(d.out_dim())
                }
            }
            Layer::Residual(block) => {
                if block.width() != in_dim {
                    Err(Error::ShapeMismatch(format!(
                        "residual block expects width {}, got {in_dim}",
                        block.width()
                    )))
                } else {
                    Ok(in_dim)
                }
            }
            Layer::Dropout(_) => Ok(in_dim),
        }
    }
}
