//! Distance-preservation diagnostics: how far apart a pair of inputs
//! stays at every layer of a network, per-layer distortion
//! coefficients, and the least-squares certificate that some weighting
//! of the layer distances reproduces the input distance.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{least_squares, nnls};
use crate::nn::Network;

/// Denominator floor below which a pair counts as collapsed.
pub const COLLAPSE_EPSILON: f64 = 1e-12;

fn euclidean(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_pairs(net: &Network, pairs: &[(Array1<f64>, Array1<f64>)]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("need at least one input pair".into()));
    }
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.len() != net.input_dim() || b.len() != net.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "pair {i} has widths {} and {}, network expects {}",
                a.len(),
                b.len(),
                net.input_dim()
            )));
        }
    }
    Ok(())
}

fn stack_pairs(pairs: &[(Array1<f64>, Array1<f64>)]) -> (Array2<f64>, Array2<f64>) {
    let d = pairs[0].0.len();
    let mut xa = Array2::<f64>::zeros((pairs.len(), d));
    let mut xb = Array2::<f64>::zeros((pairs.len(), d));
    for (i, (a, b)) in pairs.iter().enumerate() {
        xa.row_mut(i).assign(a);
        xb.row_mut(i).assign(b);
    }
    (xa, xb)
}

/// Per-layer Euclidean distances for each pair: column l holds the
/// distance after layer l+1 (columns 0..L for a depth-L network). The
/// input-space distances come back separately as the second value.
pub fn layer_distances(
    net: &Network,
    pairs: &[(Array1<f64>, Array1<f64>)],
) -> Result<(Array2<f64>, Array1<f64>)> {
    check_pairs(net, pairs)?;
    let (xa, xb) = stack_pairs(pairs);
    let acts_a = net.forward_all(&xa.view())?;
    let acts_b = net.forward_all(&xb.view())?;
    let depth = net.depth();
    let mut distances = Array2::<f64>::zeros((pairs.len(), depth));
    for l in 0..depth {
        for i in 0..pairs.len() {
            distances[[i, l]] = euclidean(&acts_a[l].row(i), &acts_b[l].row(i));
        }
    }
    let d_x = Array1::from_iter(
        pairs
            .iter()
            .map(|(a, b)| euclidean(&a.view(), &b.view())),
    );
    Ok((distances, d_x))
}

/// Per-pair, per-layer expansion ratios. `per_layer_rho[[i, l]]` is
/// d_l / d_{l-1} for pair i (with d_{-1} = the input distance); when
/// the previous layer collapsed the pair the ratio is 1 by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionProfile {
    pub per_layer_rho: Array2<f64>,
    pub pair_input_distances: Array1<f64>,
}

impl DistortionProfile {
    /// One row per (pair, layer) cell.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "pair,layer,rho")?;
        for i in 0..self.per_layer_rho.nrows() {
            for l in 0..self.per_layer_rho.ncols() {
                writeln!(out, "{i},{l},{}", self.per_layer_rho[[i, l]])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Distortion coefficients rho_l = d_l / d_{l-1} with the collapsed
/// convention rho = 1.
pub fn distortion(net: &Network, pairs: &[(Array1<f64>, Array1<f64>)]) -> Result<DistortionProfile> {
    let (distances, d_x) = layer_distances(net, pairs)?;
    let depth = net.depth();
    let mut rho = Array2::<f64>::zeros((pairs.len(), depth));
    for i in 0..pairs.len() {
        for l in 0..depth {
            let prev = if l == 0 { d_x[i] } else { distances[[i, l - 1]] };
            rho[[i, l]] = if prev > COLLAPSE_EPSILON {
                distances[[i, l]] / prev
            } else {
                1.0
            };
        }
    }
    Ok(DistortionProfile {
        per_layer_rho: rho,
        pair_input_distances: d_x,
    })
}

/// Least-squares certificate that the layer distances can reproduce
/// the input distance: weights r (nonnegative by default), the mean
/// reconstruction ratio, and the RMS residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationFit {
    /// One weight per distance column supplied to the fit.
    pub r: Vec<f64>,
    /// Mean over pairs of (D r) / d_X; 1 certifies exact preservation
    /// in the mean.
    pub constant_c: f64,
    /// RMS of D r - d_X over pairs.
    pub residual: f64,
}

fn fit_with(
    distances: &ArrayView2<f64>,
    d_x: &ArrayView1<f64>,
    solver: impl Fn(&ArrayView2<f64>, &ArrayView1<f64>) -> Result<Array1<f64>>,
) -> Result<PreservationFit> {
    let n = distances.nrows();
    if n != d_x.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} distance rows vs {} input distances",
            d_x.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    if distances.iter().all(|&v| v.abs() <= COLLAPSE_EPSILON) {
        return Err(Error::DegenerateFit(
            "all layer distances are zero; nothing to weight".into(),
        ));
    }
    let r = solver(distances, d_x)?;
    let reconstructed = distances.dot(&r);
    let mut sq_err = 0.0;
    let mut ratio_sum = 0.0;
    let mut ratio_count = 0usize;
    for i in 0..n {
        let err = reconstructed[i] - d_x[i];
        sq_err += err * err;
        if d_x[i] > COLLAPSE_EPSILON {
            ratio_sum += reconstructed[i] / d_x[i];
            ratio_count += 1;
        }
    }
    let constant_c = if ratio_count == 0 {
        return Err(Error::DegenerateFit(
            "every pair has zero input distance".into(),
        ));
    } else {
        ratio_sum / ratio_count as f64
    };
    Ok(PreservationFit {
        r: r.to_vec(),
        constant_c,
        residual: (sq_err / n as f64).sqrt(),
    })
}

/// Nonnegative least squares of d_X on the layer-distance columns.
pub fn fit_preservation_weights(
    distances: &ArrayView2<f64>,
    d_x: &ArrayView1<f64>,
) -> Result<PreservationFit> {
    fit_with(distances, d_x, |a, b| nnls(a, b))
}

/// Unconstrained variant (weights may be negative); exact existence
/// checks use this.
pub fn fit_preservation_weights_unconstrained(
    distances: &ArrayView2<f64>,
    d_x: &ArrayView1<f64>,
) -> Result<PreservationFit> {
    fit_with(distances, d_x, |a, b| least_squares(a, b))
}

/// Fraction of pairs the given layer keeps apart: d_layer > epsilon *
/// d_X. Layer indices are 1-based like tap indices (layer 1 = first).
pub fn collapse_resistance(
    net: &Network,
    pairs: &[(Array1<f64>, Array1<f64>)],
    layer: usize,
    epsilon: f64,
) -> Result<f64> {
    if layer == 0 || layer > net.depth() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside 1..={}",
            net.depth()
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (distances, d_x) = layer_distances(net, pairs)?;
    let kept = (0..pairs.len())
        .filter(|&i| distances[[i, layer - 1]] > epsilon * d_x[i])
        .count();
    Ok(kept as f64 / pairs.len() as f64)
}

/// Draws pairs of distinct rows from a data matrix, deterministic
/// under seed. Convenience for the diagnostics above.
pub fn sample_pairs(
    x: &ArrayView2<f64>,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<(Array1<f64>, Array1<f64>)>> {
    use rand::Rng;
    use rand::SeedableRng;
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two rows to form pairs".into(),
        ));
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..x.nrows());
        let mut j = rng.gen_range(0..x.nrows());
        while j == i {
            j = rng.gen_range(0..x.nrows());
        }
        pairs.push((x.row(i).to_owned(), x.row(j).to_owned()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, Layer, Mode};
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_net(scales: &[f64], dim: usize) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = scales
            .iter()
            .map(|&s| {
                let mut l = DenseLayer::new(dim, dim, Activation::Identity, &mut rng);
                l.weights.fill(0.0);
                for i in 0..dim {
                    l.weights[[i, i]] = s;
                }
                l.bias.fill(0.0);
                Layer::Dense(l)
            })
            .collect();
        Network::new(layers, Vec::new()).unwrap()
    }

    fn random_pairs(dim: usize, n: usize, seed: u64) -> Vec<(Array1<f64>, Array1<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (
                    Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0)),
                    Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0)),
                )
            })
            .collect()
    }

    #[test]
    fn identity_network_preserves_all_distances() {
        let net = linear_net(&[1.0, 1.0, 1.0], 3);
        let pairs = random_pairs(3, 10, 1);
        let (distances, d_x) = layer_distances(&net, &pairs).unwrap();
        for i in 0..10 {
            for l in 0..3 {
                assert!((distances[[i, l]] - d_x[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_layer_doubles_distances() {
        let net = linear_net(&[2.0], 2);
        let pairs = vec![(array![0.0, 0.0], array![1.0, 1.0])];
        let (distances, d_x) = layer_distances(&net, &pairs).unwrap();
        assert!((distances[[0, 0]] - 2.0 * d_x[0]).abs() < 1e-12);
    }

    #[test]
    fn distances_match_tap_recomputation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = crate::nn::mlp(3, &[8, 5, 4], None, &mut rng);
        let pairs = random_pairs(3, 6, 3);
        let (distances, _) = layer_distances(&net, &pairs).unwrap();
        // Oracle: run each pair element separately through
        // forward_trace and recompute from the taps.
        for (i, (a, b)) in pairs.iter().enumerate() {
            let ta = net
                .forward_trace(&a.view().insert_axis(ndarray::Axis(0)), Mode::Eval)
                .unwrap();
            let tb = net
                .forward_trace(&b.view().insert_axis(ndarray::Axis(0)), Mode::Eval)
                .unwrap();
            for l in 1..=3usize {
                let da = ta.tap(l).row(0).to_owned();
                let db = tb.tap(l).row(0).to_owned();
                let expect = euclidean(&da.view(), &db.view());
                assert!(
                    (distances[[i, l - 1]] - expect).abs() < 1e-12,
                    "pair {i} layer {l}"
                );
            }
        }
    }

    #[test]
    fn distortion_identity_and_scaling() {
        let net = linear_net(&[1.0, 2.0], 2);
        let pairs = vec![(array![0.0, 1.0], array![1.0, 0.0])];
        let profile = distortion(&net, &pairs).unwrap();
        assert!((profile.per_layer_rho[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((profile.per_layer_rho[[0, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn collapsed_pairs_use_unit_convention() {
        // First layer projects everything to zero; later ratios are 1.
        let net = linear_net(&[0.0, 3.0], 2);
        let pairs = vec![(array![1.0, 2.0], array![-1.0, 0.5])];
        let profile = distortion(&net, &pairs).unwrap();
        assert_eq!(profile.per_layer_rho[[0, 0]], 0.0);
        assert_eq!(profile.per_layer_rho[[0, 1]], 1.0);
        // Identical inputs collapse at the input itself.
        let pairs = vec![(array![1.0, 1.0], array![1.0, 1.0])];
        let profile = distortion(&linear_net(&[2.0], 2), &pairs).unwrap();
        assert_eq!(profile.per_layer_rho[[0, 0]], 1.0);
    }

    #[test]
    fn telescoping_identity_holds_without_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = crate::nn::mlp(3, &[10, 10, 10], None, &mut rng);
        let pairs = random_pairs(3, 20, 5);
        let (distances, d_x) = layer_distances(&net, &pairs).unwrap();
        let profile = distortion(&net, &pairs).unwrap();
        for i in 0..pairs.len() {
            let collapsed = (0..3).any(|l| distances[[i, l]] <= COLLAPSE_EPSILON);
            if collapsed || d_x[i] <= COLLAPSE_EPSILON {
                continue;
            }
            let mut product = d_x[i];
            for l in 0..3 {
                product *= profile.per_layer_rho[[i, l]];
                let rel = (distances[[i, l]] - product).abs() / distances[[i, l]];
                assert!(rel < 1e-9, "pair {i} layer {l}: relative error {rel}");
            }
        }
    }

    #[test]
    fn exact_fit_on_scaled_identity() {
        // Single layer W = 2I: distances double, so r = 0.5
        // reconstructs d_X exactly with C = 1.
        let net = linear_net(&[2.0], 2);
        let pairs = random_pairs(2, 12, 6);
        let (distances, d_x) = layer_distances(&net, &pairs).unwrap();
        let fit = fit_preservation_weights(&distances.view(), &d_x.view()).unwrap();
        assert!((fit.r[0] - 0.5).abs() < 1e-10, "r = {:?}", fit.r);
        assert!(fit.residual < 1e-10);
        assert!((fit.constant_c - 1.0).abs() < 1e-10);
    }

    #[test]
    fn proportional_columns_fit_exactly() {
        // Columns are fixed multiples of d_x, so the system is exactly
        // solvable.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 30;
        let d_x = Array1::from_shape_fn(n, |_| rng.gen_range(0.5..3.0));
        let mut distances = Array2::<f64>::zeros((n, 3));
        for i in 0..n {
            distances[[i, 0]] = 2.0 * d_x[i];
            distances[[i, 1]] = 0.5 * d_x[i];
            distances[[i, 2]] = 1.5 * d_x[i];
        }
        let fit = fit_preservation_weights(&distances.view(), &d_x.view()).unwrap();
        assert!(fit.residual < 1e-10, "residual {}", fit.residual);
        assert!((fit.constant_c - 1.0).abs() < 1e-10);
        let unconstrained =
            fit_preservation_weights_unconstrained(&distances.view(), &d_x.view()).unwrap();
        assert!(unconstrained.residual < 1e-10);
    }

    #[test]
    fn residual_matches_rms_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 25;
        let distances = Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.1..2.0));
        let d_x = Array1::from_shape_fn(n, |_| rng.gen_range(0.1..2.0));
        let fit = fit_preservation_weights(&distances.view(), &d_x.view()).unwrap();
        let r = Array1::from_vec(fit.r.clone());
        let recon = distances.dot(&r);
        let rms = ((0..n).map(|i| (recon[i] - d_x[i]).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((fit.residual - rms).abs() < 1e-12);
        for w in &fit.r {
            assert!(*w >= 0.0);
        }
    }

    #[test]
    fn zero_distances_are_degenerate() {
        let distances = Array2::<f64>::zeros((5, 3));
        let d_x = Array1::from_elem(5, 1.0);
        let err = fit_preservation_weights(&distances.view(), &d_x.view()).unwrap_err();
        assert!(matches!(err, Error::DegenerateFit(_)));
    }

    #[test]
    fn collapse_resistance_extremes() {
        let pairs = random_pairs(2, 20, 9);
        let identity = linear_net(&[1.0], 2);
        assert_eq!(
            collapse_resistance(&identity, &pairs, 1, 1e-12).unwrap(),
            1.0
        );
        let zero = linear_net(&[0.0], 2);
        assert_eq!(collapse_resistance(&zero, &pairs, 1, 1e-12).unwrap(), 0.0);
        assert!(collapse_resistance(&identity, &pairs, 2, 1e-12).is_err());
        assert!(collapse_resistance(&identity, &pairs, 1, -1.0).is_err());
    }

    #[test]
    fn orthogonal_layer_distortion_is_one() {
        // Rotation by 30 degrees preserves Euclidean distances.
        let theta: f64 = 30f64.to_radians();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut l = DenseLayer::new(2, 2, Activation::Identity, &mut rng);
        l.weights[[0, 0]] = theta.cos();
        l.weights[[0, 1]] = -theta.sin();
        l.weights[[1, 0]] = theta.sin();
        l.weights[[1, 1]] = theta.cos();
        l.bias.fill(0.0);
        let net = Network::new(vec![Layer::Dense(l)], Vec::new()).unwrap();
        let pairs = random_pairs(2, 15, 11);
        let profile = distortion(&net, &pairs).unwrap();
        for i in 0..15 {
            assert!((profile.per_layer_rho[[i, 0]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_exports_csv() {
        let net = linear_net(&[2.0, 1.0], 2);
        let pairs = random_pairs(2, 3, 12);
        let profile = distortion(&net, &pairs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rho.csv");
        profile.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("pair,layer,rho\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
    }
}
