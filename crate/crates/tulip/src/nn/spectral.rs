//! Spectral normalization via power iteration.
//!
//! Layers configured with a coefficient `c` are projected after every
//! optimizer step: if the estimated top singular value sigma exceeds c,
//! weights are scaled by c/sigma, otherwise left untouched. The
//! power-iteration vector persists on the layer, so steady-state
//! projections converge in one or two iterations; each call still
//! iterates until the estimate is stable to `SIGMA_TOL` so the post-step
//! bound sigma_max <= c*(1 + 1e-6) holds from the first step on.

use ndarray::{Array1, ArrayView2};

use super::layer::DenseLayer;
use super::Network;

/// Relative convergence tolerance for the sigma estimate.
const SIGMA_TOL: f64 = 1e-9;
/// Hard cap on iterations per projection; warm starts rarely need more
/// than a couple.
const MAX_ITERS: usize = 100;

/// Estimates the top singular value of `w` by power iteration on
/// W W^T. Returns `(sigma, u)` where `u` is the left singular vector
/// estimate; pass it back in to warm-start the next call. A zero matrix
/// yields sigma = 0.
pub fn power_iteration(
    w: &ArrayView2<f64>,
    warm_u: Option<&Array1<f64>>,
    max_iters: usize,
    tol: f64,
) -> (f64, Array1<f64>) {
    let out_dim = w.nrows();
    let mut u = match warm_u {
        Some(u) if u.len() == out_dim => u.clone(),
        _ => {
            // Deterministic cold start; any vector not orthogonal to the
            // top singular direction works, and renormalization below
            // recovers from unlucky starts.
            Array1::from_shape_fn(out_dim, |i| 1.0 + (i as f64) * 0.01)
        }
    };
    let norm = u.dot(&u).sqrt();
    if norm > 0.0 {
        u /= norm;
    } else {
        u.fill(0.0);
        u[0] = 1.0;
    }

    let mut sigma = 0.0;
    for iter in 0..max_iters.max(1) {
        let mut v = w.t().dot(&u);
        let v_norm = v.dot(&v).sqrt();
        if v_norm <= f64::MIN_POSITIVE {
            // u sits in the null space of W^T; restart once from a
            // basis-shifted vector, otherwise treat the matrix as zero.
            if iter == 0 {
                u.fill(0.0);
                u[iter % out_dim] = 1.0;
                let retry = w.t().dot(&u);
                if retry.dot(&retry).sqrt() <= f64::MIN_POSITIVE {
                    return (0.0, u);
                }
                continue;
            }
            return (0.0, u);
        }
        v /= v_norm;
        let wu = w.dot(&v);
        let wu_norm = wu.dot(&wu).sqrt();
        if wu_norm <= f64::MIN_POSITIVE {
            return (0.0, u);
        }
        u = &wu / wu_norm;
        let new_sigma = u.dot(&w.dot(&v));
        if (new_sigma - sigma).abs() <= tol * new_sigma.max(f64::MIN_POSITIVE) {
            return (new_sigma, u);
        }
        sigma = new_sigma;
    }
    (sigma, u)
}

/// Projects one dense layer onto the spectral-norm ball of radius `c`:
/// scales weights by c/sigma when sigma > c. Updates the layer's cached
/// power-iteration vector and returns the sigma estimate observed before
/// scaling.
pub fn spectral_normalize_layer(layer: &mut DenseLayer, c: f64, max_iters: usize) -> f64 {
    let warm = layer.spectral.as_ref().map(|s| s.u.clone());
    let (sigma, u) = power_iteration(&layer.weights.view(), warm.as_ref(), max_iters, SIGMA_TOL);
    if sigma > c {
        let scale = c / sigma;
        layer.weights.mapv_inplace(|w| w * scale);
    }
    if let Some(state) = layer.spectral.as_mut() {
        state.u = u;
    }
    sigma
}

/// Projects every spectral-norm-configured dense layer in the network
/// using each layer's own coefficient. Called after each optimizer step.
pub(crate) fn normalize_configured(net: &mut Network) {
    net.visit_dense_mut(&mut |layer| {
        if let Some(state) = &layer.spectral {
            let c = state.coefficient;
            spectral_normalize_layer(layer, c, MAX_ITERS);
        }
    });
}

/// Applies spectral normalization with an explicit coefficient to every
/// dense layer in the network, regardless of configuration. Standalone
/// entry point; training uses the per-layer configuration instead.
pub fn spectral_normalize_network(net: &mut Network, c: f64, max_iters: usize) {
    net.visit_dense_mut(&mut |layer| {
        spectral_normalize_layer(layer, c, max_iters);
    });
}
