//! Feed-forward networks with exposed intermediate activations.
//!
//! A [`Network`] is an ordered stack of layers plus a list of tap
//! points. A tap point `t` exposes the activation after the first `t`
//! layers, so valid taps lie in `1..=depth`; the final output is the
//! activation after all layers. Backward passes accept extra gradient
//! injections at tap points, which is how multi-exit models feed their
//! auxiliary heads' gradients into a shared backbone.

mod layer;
mod loss;
mod spectral;
pub(crate) mod train;

pub use layer::{Activation, DenseGrad, DenseLayer, DropoutLayer, Layer, ResidualBlock, SpectralState};
pub use loss::{cross_entropy, cross_entropy_grad, log_softmax, logsumexp, softmax};
pub use spectral::{power_iteration, spectral_normalize_layer, spectral_normalize_network};
pub(crate) use spectral::normalize_configured;
pub use train::{train, Loss, OptState, OptimizerKind, TrainConfig};

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use layer::DenseCache;

/// Forward-pass mode. Train mode samples dropout masks from the
/// supplied generator; eval mode is deterministic and read-only.
pub enum Mode<'r> {
    Train(&'r mut ChaCha8Rng),
    Eval,
}

/// Per-layer caches retained by a tracing forward pass.
pub(crate) enum LayerCache {
    Dense(DenseCache),
    Residual(Vec<DenseCache>),
    Dropout(Option<Array2<f64>>),
}

/// Everything backward needs from one forward pass.
pub struct ForwardTrace {
    caches: Vec<LayerCache>,
    /// Activation after each layer, length = depth.
    activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    /// Activation after `t` layers (tap semantics); `t = 0` is invalid.
    pub fn tap(&self, t: usize) -> &Array2<f64> {
        &self.activations[t - 1]
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("network has layers")
    }
}

/// Gradients for every trainable dense slot in a network, in slot order
/// (layers in order; inside a residual block, inner layers in order).
pub struct NetworkGrads {
    pub slots: Vec<DenseGrad>,
}

impl NetworkGrads {
    pub fn zeros_like(net: &Network) -> Self {
        let mut slots = Vec::with_capacity(net.dense_slot_count());
        net.visit_dense(&mut |layer| slots.push(DenseGrad::zeros_like(layer)));
        NetworkGrads { slots }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// Strictly increasing tap points in `1..=depth`.
    pub tap_points: Vec<usize>,
    /// Diagnostic probe: number of forward passes executed. Not part of
    /// the model state (skipped by serialization, compared by nothing).
    #[serde(skip, default)]
    forward_calls: AtomicU64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            layers: self.layers.clone(),
            tap_points: self.tap_points.clone(),
            forward_calls: AtomicU64::new(self.forward_calls.load(Ordering::Relaxed)),
        }
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, tap_points: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if matches!(layers[0], Layer::Dropout(_)) {
            return Err(Error::InvalidArgument(
                "first layer must be dense or residual so the input width is defined".into(),
            ));
        }
        // Walk the width chain once to catch mismatches at construction.
        let mut width = match &layers[0] {
            Layer::Dense(d) => d.in_dim(),
            Layer::Residual(b) => b.width(),
            Layer::Dropout(_) => unreachable!(),
        };
        for layer in &layers {
            width = layer.out_dim(width)?;
        }
        let net = Network {
            layers,
            tap_points: Vec::new(),
            forward_calls: AtomicU64::new(0),
        };
        let mut net = net;
        net.set_tap_points(tap_points)?;
        Ok(net)
    }

    /// Replaces the tap points, validating range and ordering.
    pub fn set_tap_points(&mut self, tap_points: Vec<usize>) -> Result<()> {
        let depth = self.layers.len();
        for pair in tap_points.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidArgument(format!(
                    "tap points must be strictly increasing, got {:?}",
                    tap_points
                )));
            }
        }
        if let Some(&bad) = tap_points.iter().find(|&&t| t == 0 || t > depth) {
            return Err(Error::InvalidArgument(format!(
                "tap point {bad} outside 1..={depth}"
            )));
        }
        self.tap_points = tap_points;
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers[0] {
            Layer::Dense(d) => d.in_dim(),
            Layer::Residual(b) => b.width(),
            Layer::Dropout(_) => unreachable!("validated at construction"),
        }
    }

    pub fn output_dim(&self) -> usize {
        let mut width = self.input_dim();
        for layer in &self.layers {
            width = layer.out_dim(width).expect("validated at construction");
        }
        width
    }

    /// Width of the activation exposed at tap `t`.
    pub fn tap_dim(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "tap point {t} outside 1..={}",
                self.depth()
            )));
        }
        let mut width = self.input_dim();
        for layer in &self.layers[..t] {
            width = layer.out_dim(width)?;
        }
        Ok(width)
    }

    pub fn forward_call_count(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_calls(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Forward pass returning the final output and the activations at
    /// the configured tap points, in tap order.
    pub fn forward(&self, x: &ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let trace = self.forward_trace(x, mode)?;
        let taps = self
            .tap_points
            .iter()
            .map(|&t| trace.tap(t).clone())
            .collect();
        Ok((trace.activations.last().unwrap().clone(), taps))
    }

    /// Forward pass retaining every per-layer cache for backward.
    pub fn forward_trace(&self, x: &ArrayView2<f64>, mut mode: Mode) -> Result<ForwardTrace> {
        self.check_input(x)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => {
                    let (cache, out) = d.forward(&h.view());
                    caches.push(LayerCache::Dense(cache));
                    out
                }
                Layer::Residual(block) => {
                    let (cache, out) = block.forward(&h.view());
                    caches.push(LayerCache::Residual(cache));
                    out
                }
                Layer::Dropout(drop) => match &mut mode {
                    Mode::Train(rng) => {
                        let mask = drop.sample_mask(h.dim(), rng);
                        let out = &h * &mask;
                        caches.push(LayerCache::Dropout(Some(mask)));
                        out
                    }
                    Mode::Eval => {
                        caches.push(LayerCache::Dropout(None));
                        h
                    }
                },
            };
            activations.push(h.clone());
        }
        Ok(ForwardTrace { caches, activations })
    }

    /// Eval-mode forward returning the activation after every layer.
    pub fn forward_all(&self, x: &ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward_trace(x, Mode::Eval)?.activations)
    }

    /// Backward pass. `grad_output` is the loss gradient w.r.t. the
    /// final activation; `tap_grads` are extra gradients injected at tap
    /// points as `(tap, gradient)`. Returns the parameter gradients and
    /// the gradient w.r.t. the network input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_output: &ArrayView2<f64>,
        tap_grads: &[(usize, Array2<f64>)],
    ) -> (NetworkGrads, Array2<f64>) {
        let mut grads = NetworkGrads::zeros_like(self);
        let mut slot_ends: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut running = 0;
        for layer in &self.layers {
            running += layer.dense_slots();
            slot_ends.push(running);
        }

        let mut d = grad_output.to_owned();
        // Gradient injected at the final tap adds to the output gradient.
        for (t, g) in tap_grads {
            if *t == self.depth() {
                d += g;
            }
        }
        for idx in (0..self.layers.len()).rev() {
            // The output of layer `idx` is tap `idx + 1`; injections at
            // interior taps join here before the layer's own backward.
            if idx + 1 < self.depth() {
                for (t, g) in tap_grads {
                    if *t == idx + 1 {
                        d += g;
                    }
                }
            }
            let slot_end = slot_ends[idx];
            d = match (&self.layers[idx], &trace.caches[idx]) {
                (Layer::Dense(layer), LayerCache::Dense(cache)) => {
                    layer.backward(cache, &d.view(), &mut grads.slots[slot_end - 1])
                }
                (Layer::Residual(block), LayerCache::Residual(caches)) => {
                    let start = slot_end - block.inner.len();
                    block.backward(caches, &d.view(), &mut grads.slots[start..slot_end])
                }
                (Layer::Dropout(_), LayerCache::Dropout(mask)) => match mask {
                    Some(m) => d * m,
                    None => d,
                },
                _ => unreachable!("trace built by this network"),
            };
        }
        (grads, d)
    }

    pub(crate) fn dense_slot_count(&self) -> usize {
        self.layers.iter().map(|l| l.dense_slots()).sum()
    }

    pub(crate) fn visit_dense(&self, f: &mut impl FnMut(&DenseLayer)) {
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => f(d),
                Layer::Residual(block) => block.inner.iter().for_each(&mut *f),
                Layer::Dropout(_) => {}
            }
        }
    }

    pub(crate) fn visit_dense_mut(&mut self, f: &mut impl FnMut(&mut DenseLayer)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => f(d),
                Layer::Residual(block) => block.inner.iter_mut().for_each(&mut *f),
                Layer::Dropout(_) => {}
            }
        }
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_dense(&mut |d| count += d.weights.len() + d.bias.len());
        count
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dropout(_)))
    }

    pub fn has_spectral_norm(&self) -> bool {
        let mut found = false;
        self.visit_dense(&mut |d| found |= d.spectral.is_some());
        found
    }
}

/// Plain multilayer perceptron: ReLU hidden layers of the given widths,
/// plus an identity-activation output layer when `output` is set.
pub fn mlp(input_dim: usize, hidden: &[usize], output: Option<usize>, rng: &mut ChaCha8Rng) -> Network {
    let mut layers = Vec::new();
    let mut width = input_dim;
    for &h in hidden {
        layers.push(Layer::Dense(DenseLayer::new(width, h, Activation::Relu, rng)));
        width = h;
    }
    if let Some(out) = output {
        layers.push(Layer::Dense(DenseLayer::new(width, out, Activation::Identity, rng)));
    }
    Network::new(layers, Vec::new()).expect("mlp construction is width-consistent")
}

/// As [`mlp`] with a dropout layer after every hidden activation.
pub fn dropout_mlp(
    input_dim: usize,
    hidden: &[usize],
    output: Option<usize>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    let dropout = DropoutLayer::new(rate)?;
    let mut layers = Vec::new();
    let mut width = input_dim;
    for &h in hidden {
        layers.push(Layer::Dense(DenseLayer::new(width, h, Activation::Relu, rng)));
        layers.push(Layer::Dropout(dropout.clone()));
        width = h;
    }
    if let Some(out) = output {
        layers.push(Layer::Dense(DenseLayer::new(width, out, Activation::Identity, rng)));
    }
    Network::new(layers, Vec::new())
}

const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format_version: u32,
    network: Network,
}

/// Writes the network as a versioned JSON weight file. Weight values
/// round-trip bit-exactly.
pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let file = NetworkFile {
        format_version: NETWORK_FORMAT_VERSION,
        network: net.clone(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    let file: NetworkFile = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if file.format_version != NETWORK_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported network format version {} (expected {NETWORK_FORMAT_VERSION})",
            file.format_version
        )));
    }
    Ok(file.network)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn identity_layer(dim: usize) -> Layer {
        Layer::Dense(DenseLayer {
            weights: Array2::eye(dim),
            bias: ndarray::Array1::zeros(dim),
            activation: Activation::Identity,
            spectral: None,
        })
    }

    #[test]
    fn identity_network_passes_input_through_and_taps_it() {
        let net = Network::new(vec![identity_layer(2)], vec![1]).unwrap();
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let (out, taps) = net.forward(&x.view(), Mode::Eval).unwrap();
        assert_eq!(out, x);
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0], x);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let net = Network::new(vec![identity_layer(2)], vec![]).unwrap();
        let x = array![[1.0, 2.0, 3.0]];
        assert!(matches!(
            net.forward(&x.view(), Mode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tap_points_validated() {
        let layers = vec![identity_layer(2), identity_layer(2)];
        assert!(Network::new(layers.clone(), vec![0]).is_err());
        assert!(Network::new(layers.clone(), vec![3]).is_err());
        assert!(Network::new(layers.clone(), vec![2, 1]).is_err());
        assert!(Network::new(layers.clone(), vec![1, 1]).is_err());
        assert!(Network::new(layers, vec![1, 2]).is_ok());
    }

    #[test]
    fn construction_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = vec![
            Layer::Dense(DenseLayer::new(2, 3, Activation::Relu, &mut rng)),
            Layer::Dense(DenseLayer::new(4, 1, Activation::Identity, &mut rng)),
        ];
        assert!(Network::new(layers, vec![]).is_err());
    }

    #[test]
    fn forward_counter_counts_every_variant() {
        let net = Network::new(vec![identity_layer(2)], vec![1]).unwrap();
        let x = array![[1.0, 2.0]];
        assert_eq!(net.forward_call_count(), 0);
        net.forward(&x.view(), Mode::Eval).unwrap();
        net.forward_all(&x.view()).unwrap();
        net.forward_trace(&x.view(), Mode::Eval).unwrap();
        assert_eq!(net.forward_call_count(), 3);
        net.reset_forward_calls();
        assert_eq!(net.forward_call_count(), 0);
    }

    #[test]
    fn tap_dim_follows_width_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = mlp(2, &[5, 7], Some(3), &mut rng);
        assert_eq!(net.tap_dim(1).unwrap(), 5);
        assert_eq!(net.tap_dim(2).unwrap(), 7);
        assert_eq!(net.tap_dim(3).unwrap(), 3);
        assert!(net.tap_dim(0).is_err());
        assert!(net.tap_dim(4).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = mlp(3, &[4], Some(2), &mut rng);
        // Inject awkward values that expose lossy float formatting.
        net.visit_dense_mut(&mut |d| {
            d.weights[[0, 0]] = 1.0 / 3.0;
            d.bias[0] = f64::MIN_POSITIVE;
        });
        let dir = std::env::temp_dir().join(format!("tulip-net-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        let mut originals = Vec::new();
        net.visit_dense(&mut |d| originals.push(d.clone()));
        let mut restored = Vec::new();
        loaded.visit_dense(&mut |d| restored.push(d.clone()));
        assert_eq!(originals.len(), restored.len());
        for (a, b) in originals.iter().zip(restored.iter()) {
            for (x, y) in a.weights.iter().zip(b.weights.iter()) {
                pairs.push((*x, *y));
            }
            for (x, y) in a.bias.iter().zip(b.bias.iter()) {
                pairs.push((*x, *y));
            }
        }
        for (x, y) in pairs {
            assert_eq!(x.to_bits(), y.to_bits(), "mismatch {x:e} vs {y:e}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_unknown_version() {
        let dir = std::env::temp_dir().join(format!("tulip-ver-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = mlp(2, &[], Some(2), &mut rng);
        save_network(&net, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 999");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_network(&path), Err(Error::Schema(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
