//! Acceptance gate: one test per release criterion, each printing a
//! single PASS line with the measured quantity. Oracles are written
//! inline and independently of the library internals they check.

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use tulip::baselines::{
    build_sngp, decompose_entropy, exit_disagreement, plain_mlp_builder, softmax_entropy_batch,
    train_ensemble, Ensemble,
};
use tulip::combiner::{fit_combination_head, predict_with_uncertainty, CombinationHead};
use tulip::data::{
    apply_imbalance, gen_far_field, gen_gaussian_classes, gen_ood_grid, gen_ring, gen_spiral,
    split_test, split_validation, Dataset, ImbalanceSpec,
};
use tulip::gp::GpConfig;
use tulip::metrics::{accuracy, auroc, ece};
use tulip::nn::{
    mlp, train, Activation, DenseLayer, Layer, Loss, Mode, Network, OptimizerKind, TrainConfig,
};
use tulip::preservation::{distortion, fit_preservation_weights, layer_distances, sample_pairs};
use tulip::sdn::{sdn_loss, sdn_loss_gradient, train_sdn, SdnLossWeights, SdnModel};

fn pass(name: &str, detail: String) {
    println!("{name}: PASS ({detail})");
}

// ---------------------------------------------------------------- 1

/// O(n^2) Mann-Whitney count: each out-of-distribution score earns 1
/// per in-distribution score below it and 1/2 per exact tie.
fn pairwise_auroc(u_id: &[f64], u_ood: &[f64]) -> f64 {
    let mut credit = 0.0;
    for &o in u_ood {
        for &i in u_id {
            if o > i {
                credit += 1.0;
            } else if o == i {
                credit += 0.5;
            }
        }
    }
    credit / (u_id.len() as f64 * u_ood.len() as f64)
}

#[test]
fn auroc_matches_pairwise_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n_id = rng.gen_range(1..=200);
        let n_ood = rng.gen_range(1..=200);
        // Half the cases draw from a coarse lattice so exact ties are
        // guaranteed, including across the two sets.
        let quantized = case % 2 == 0;
        let mut draw = |rng: &mut ChaCha8Rng| -> f64 {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if quantized {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        };
        let u_id: Vec<f64> = (0..n_id).map(|_| draw(&mut rng)).collect();
        let u_ood: Vec<f64> = (0..n_ood).map(|_| draw(&mut rng)).collect();
        let fast = auroc(&u_id, &u_ood).unwrap();
        let slow = pairwise_auroc(&u_id, &u_ood);
        worst = worst.max((fast - slow).abs());
    }
    assert!(worst <= 1e-12, "worst deviation {worst:.3e}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    pass(
        "auroc vs pairwise oracle",
        format!("200 sets, worst deviation {worst:.2e}, {elapsed:?}"),
    );
}

// ---------------------------------------------------------------- 2

/// Straight transcription of the calibration-error definition: assign
/// right-closed equal-width bins, then sum bin weight times the gap
/// between bin accuracy and bin mean confidence.
fn summation_ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> f64 {
    let n = confidences.len() as f64;
    let mut out = 0.0;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let members: Vec<usize> = (0..confidences.len())
            .filter(|&i| {
                let c = confidences[i];
                (c > lo && c <= hi) || (b == 0 && c <= lo)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let conf = members.iter().map(|&i| confidences[i]).sum::<f64>() / m;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        out += m / n * (acc - conf).abs();
    }
    out
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
}

/// Jensen-gap disagreement computed sample by sample: entropy of the
/// member-mean distribution minus mean member entropy, floored at 0.
fn summation_disagreement(members: &[Array2<f64>]) -> Array1<f64> {
    let n = members[0].nrows();
    let k = members[0].ncols();
    let m = members.len() as f64;
    Array1::from_shape_fn(n, |i| {
        let mean: Vec<f64> = (0..k)
            .map(|c| members.iter().map(|p| p[(i, c)]).sum::<f64>() / m)
            .collect();
        let mean_entropy =
            members.iter().map(|p| entropy(p.row(i).as_slice().unwrap())).sum::<f64>() / m;
        (entropy(&mean) - mean_entropy).max(0.0)
    })
}

#[test]
fn ece_and_disagreement_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_ece = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=400);
        let confidences: Vec<f64> = (0..n)
            .map(|_| match rng.gen_range(0..4) {
                // Exact bin edges stress the boundary convention.
                0 => rng.gen_range(0..=15) as f64 / 15.0,
                _ => rng.gen_range(0.0..=1.0),
            })
            .collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        let got = ece(&confidences, &correct, 15).unwrap();
        let want = summation_ece(&confidences, &correct, 15);
        worst_ece = worst_ece.max((got - want).abs());
    }
    assert!(worst_ece <= 1e-12, "worst ece deviation {worst_ece:.3e}");

    let mut worst_dis = 0.0f64;
    for _ in 0..100 {
        let m = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=40);
        let k = rng.gen_range(2..=6);
        let members: Vec<Array2<f64>> = (0..m)
            .map(|_| {
                let mut p = Array2::from_shape_fn((n, k), |_| -> f64 {
                    // Occasional exact zeros exercise the 0 ln 0 = 0
                    // convention.
                    if rng.gen_bool(0.15) {
                        0.0
                    } else {
                        rng.gen_range(0.0f64..1.0)
                    }
                });
                for mut row in p.rows_mut() {
                    let s = row.sum();
                    if s == 0.0 {
                        row[0] = 1.0;
                    } else {
                        row /= s;
                    }
                }
                p
            })
            .collect();
        let (_, got) = decompose_entropy(&members).unwrap();
        let want = summation_disagreement(&members);
        for (g, w) in got.iter().zip(want.iter()) {
            worst_dis = worst_dis.max((g - w).abs());
        }
    }
    assert!(worst_dis <= 1e-12, "worst disagreement deviation {worst_dis:.3e}");
    pass(
        "ece and disagreement vs direct summation",
        format!("100 instances each, deviations {worst_ece:.2e} / {worst_dis:.2e}"),
    );
}

// ---------------------------------------------------------------- 3

fn random_gradient_model(case: usize, rng: &mut ChaCha8Rng) -> SdnModel {
    let in_dim = rng.gen_range(2..=4);
    let k = rng.gen_range(2..=4);
    let gp = GpConfig {
        rff_dim: rng.gen_range(4..=8),
        length_scale: rng.gen_range(0.5..2.5),
        ridge: 1.0,
        mean_field_lambda: std::f64::consts::PI / 8.0,
    };
    // Half the cases run a residual block in the middle so skip-path
    // gradients are covered alongside plain dense stacks.
    let backbone = if case % 2 == 0 {
        let h = rng.gen_range(3..=5);
        mlp(in_dim, &[h, h, rng.gen_range(3..=5)], None, rng)
    } else {
        let w = rng.gen_range(3..=5);
        let layers = vec![
            Layer::Dense(DenseLayer::new(in_dim, w, Activation::Relu, rng)),
            Layer::Residual(
                tulip::nn::ResidualBlock::new(vec![
                    DenseLayer::new(w, w, Activation::Relu, rng),
                    DenseLayer::new(w, w, Activation::Identity, rng),
                ])
                .unwrap(),
            ),
            Layer::Dense(DenseLayer::new(w, w, Activation::Relu, rng)),
        ];
        Network::new(layers, vec![]).unwrap()
    };
    let n_ic = rng.gen_range(1..=2);
    SdnModel::new(backbone, n_ic, k, &gp, rng).unwrap()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut skipped = 0usize;
    let mut total = 0usize;
    for case in 0..20 {
        let mut model = random_gradient_model(case, &mut rng);
        let in_dim = model.backbone().input_dim();
        let k = model.n_classes();
        let n = 6;
        let x = Array2::from_shape_fn((n, in_dim), |_| rng.gen_range(-1.5..1.5));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let weights = SdnLossWeights::equal(model.n_ic());

        // Jitter every parameter so biases are random too. Fresh layers
        // start with zero bias, which parks ReLU pre-activations exactly
        // on the kink whenever an upstream row goes fully dead; there the
        // one-sided slopes differ but every central difference converges
        // to their average, so the stencil cannot flag the kink itself.
        let mut theta = model.flat_params();
        for v in theta.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        model.set_flat_params(&theta).unwrap();

        let (_, analytic) = sdn_loss_gradient(&model, &x.view(), &labels, &weights).unwrap();
        assert_eq!(analytic.len(), theta.len());
        total += theta.len();

        let mut loss_at = |theta: &mut Vec<f64>, i: usize, delta: f64| -> f64 {
            theta[i] += delta;
            model.set_flat_params(theta).unwrap();
            let (l, _) = sdn_loss(&model, &x.view(), &labels, &weights).unwrap();
            theta[i] -= delta;
            l
        };
        for i in 0..theta.len() {
            let diff = |s: &mut dyn FnMut(f64) -> f64, step: f64| (s(step) - s(-step)) / (2.0 * step);
            let mut stencil = |delta: f64| loss_at(&mut theta, i, delta);
            let numeric = diff(&mut stencil, h);
            let halved = diff(&mut stencil, h / 2.0);
            // A piecewise-linear kink inside the stencil invalidates the
            // finite-difference oracle itself; such coordinates show up
            // as non-converging difference quotients and are skipped
            // (bounded below).
            if (numeric - halved).abs() > 1e-6 * numeric.abs().max(1.0) {
                skipped += 1;
                continue;
            }
            let scale = analytic[i].abs().max(numeric.abs());
            let err = if scale < 1e-6 {
                (analytic[i] - numeric).abs()
            } else {
                (analytic[i] - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
        model.set_flat_params(&theta).unwrap();
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst:.3e}");
    assert!(
        (skipped as f64) < 0.02 * total as f64,
        "{skipped} of {total} coordinates sat on kinks"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    pass(
        "gradients vs central differences",
        format!("20 networks, {total} parameters, worst error {worst:.2e}, {skipped} kink coordinates excluded, {elapsed:?}"),
    );
}

// ---------------------------------------------------------------- 4

fn exact_sigma_max(w: &ArrayView2<f64>) -> f64 {
    let m = nalgebra::DMatrix::from_row_iterator(w.nrows(), w.ncols(), w.iter().copied());
    m.svd(false, false).singular_values.max()
}

#[test]
fn spectral_budget_holds_under_exact_svd() {
    let coefficient = 3.0;
    let base = gen_gaussian_classes(200, 4, 2, 6.0, 1.0, 404).unwrap();
    let ds = split_test(&base, 0.2, 405).unwrap();
    let (x, y) = ds.train_xy().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(406);
    let gp = GpConfig { rff_dim: 32, ..GpConfig::default() };
    let mut model = build_sngp(2, 2, 32, 4, coefficient, &gp, &mut rng).unwrap();
    train_sdn(
        &mut model,
        &x.view(),
        &y,
        &TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            lr_schedule: vec![],
            seed: 407,
        },
        &SdnLossWeights::equal(0),
    )
    .unwrap();

    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut dense = |layer: &DenseLayer| {
        if layer.spectral.is_some() {
            let sigma = exact_sigma_max(&layer.weights.view());
            worst = worst.max(sigma);
            checked += 1;
        }
    };
    for layer in &model.backbone().layers {
        match layer {
            Layer::Dense(d) => dense(d),
            Layer::Residual(block) => block.inner.iter().for_each(&mut dense),
            Layer::Dropout(_) => {}
        }
    }
    assert!(checked >= 3, "expected several normalized layers, saw {checked}");
    let bound = coefficient * (1.0 + 1e-6);
    assert!(worst <= bound, "sigma_max {worst} exceeds {bound}");
    pass(
        "spectral budget under exact svd",
        format!("{checked} layers after 50 epochs, max sigma {worst:.6}"),
    );
}

// ---------------------------------------------------------------- 5

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    loop {
        let mut cols: Vec<Array1<f64>> = Vec::with_capacity(d);
        for _ in 0..d {
            let mut v = Array1::from_shape_fn(d, |_| {
                rand_distr::StandardNormal.sample(rng)
            });
            for c in &cols {
                let dot = v.dot(c);
                v = v - c.mapv(|x| x * dot);
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-6 {
                cols.clear();
                break;
            }
            cols.push(v / norm);
        }
        if cols.len() == d {
            return Array2::from_shape_fn((d, d), |(i, j)| cols[j][i]);
        }
    }
}

#[test]
fn preservation_weights_recover_isotropic_linear_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_residual = 0.0f64;
    let mut worst_c = 0.0f64;
    let mut worst_telescope = 0.0f64;
    for _ in 0..50 {
        let d = rng.gen_range(2..=5);
        let depth = rng.gen_range(2..=4);
        // Isotropic linear layers: scaled rotations. The first layer is
        // orthogonal-times-positive-scale, hence injective.
        let layers: Vec<Layer> = (0..depth)
            .map(|_| {
                let scale = rng.gen_range(0.5..2.0);
                let mut layer = DenseLayer::new(d, d, Activation::Identity, &mut rng);
                layer.weights = random_orthogonal(d, &mut rng).mapv(|v| v * scale);
                layer.bias.fill(rng.gen_range(-0.5..0.5));
                Layer::Dense(layer)
            })
            .collect();
        let net = Network::new(layers, vec![]).unwrap();

        let x = Array2::from_shape_fn((80, d), |_| rng.gen_range(-2.0..2.0));
        let pairs = sample_pairs(&x.view(), 200, rng.gen()).unwrap();

        let (dists, d_x) = layer_distances(&net, &pairs).unwrap();
        let fit = fit_preservation_weights(&dists.view(), &d_x.view()).unwrap();
        worst_residual = worst_residual.max(fit.residual);
        worst_c = worst_c.max((fit.constant_c - 1.0).abs());

        // Telescoping: the running product of distortion ratios must
        // reproduce each layer distance over the input distance.
        let profile = distortion(&net, &pairs).unwrap();
        for (p, (row, &dx)) in profile
            .per_layer_rho
            .outer_iter()
            .zip(d_x.iter())
            .enumerate()
        {
            if dx == 0.0 {
                continue;
            }
            let mut product = 1.0;
            for (l, rho) in row.iter().enumerate() {
                product *= rho;
                let ratio = dists[(p, l)] / dx;
                if ratio == 0.0 {
                    break;
                }
                worst_telescope = worst_telescope.max((product - ratio).abs() / ratio);
            }
        }
    }
    assert!(worst_residual < 1e-8, "worst residual {worst_residual:.3e}");
    assert!(worst_c <= 1e-3, "constant off by {worst_c:.3e}");
    assert!(worst_telescope <= 1e-9, "telescoping error {worst_telescope:.3e}");
    pass(
        "preservation fit on linear networks",
        format!(
            "50 nets: residual {worst_residual:.2e}, |C-1| {worst_c:.2e}, telescope {worst_telescope:.2e}"
        ),
    );
}

// ------------------------------------------------------------ 6/7/9

const SPIRAL_SEEDS: [u64; 3] = [0, 1, 2];
const SPIRAL_HIDDEN: [usize; 3] = [32, 32, 32];

struct SpiralArtifacts {
    ds: Dataset,
    radius: f64,
    model: SdnModel,
    head: CombinationHead,
    plain: Network,
    ensemble: Ensemble,
}

fn train_spiral_seed(seed: u64) -> SpiralArtifacts {
    let base = gen_spiral(500, 3, 1.0, 0.05, seed).unwrap();
    let mut ds = split_test(&base, 0.2, seed ^ 0xA5).unwrap();
    ds = split_validation(&ds, 0.1, seed ^ 0x5A).unwrap();
    ds.scrub_validation_labels();
    let (x, y) = ds.train_xy().unwrap();
    let radius = ds.train_radius();

    let sdn_cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        epochs: 800,
        batch_size: 64,
        lr_schedule: vec![],
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let backbone = mlp(2, &SPIRAL_HIDDEN, None, &mut rng);
    let gp = GpConfig { rff_dim: 64, ..GpConfig::default() };
    let mut model = SdnModel::new(backbone, 2, 3, &gp, &mut rng).unwrap();
    train_sdn(&mut model, &x.view(), &y, &sdn_cfg, &SdnLossWeights::equal(2)).unwrap();
    let x_val = ds.validation_features();
    let head = fit_combination_head(
        &model,
        &x_val.view(),
        None,
        Default::default(),
        Default::default(),
        1e-3,
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(33));
    let mut plain = mlp(2, &SPIRAL_HIDDEN, Some(3), &mut rng);
    train(&mut plain, &x.view(), &y, &sdn_cfg, Loss::CrossEntropy).unwrap();

    let ens_cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.008,
        epochs: 400,
        ..sdn_cfg
    };
    let builder = plain_mlp_builder(2, SPIRAL_HIDDEN.to_vec(), 3);
    let ensemble =
        train_ensemble(&builder, 10, &x.view(), &y, &ens_cfg, seed.wrapping_add(49)).unwrap();

    SpiralArtifacts { ds, radius, model, head, plain, ensemble }
}

fn spiral_artifacts() -> &'static [SpiralArtifacts] {
    static CELL: OnceLock<Vec<SpiralArtifacts>> = OnceLock::new();
    CELL.get_or_init(|| SPIRAL_SEEDS.iter().map(|&s| train_spiral_seed(s)).collect())
}

#[test]
fn far_ring_uncertainty_dominates_test_split() {
    let start = Instant::now();
    let mut ratios = Vec::new();
    for (i, art) in spiral_artifacts().iter().enumerate() {
        let (x_test, _) = art.ds.test_xy().unwrap();
        let (_, u_test) =
            predict_with_uncertainty(&art.model, &art.head, &x_test.view()).unwrap();
        let ring = gen_ring(2.0 * art.radius, 0.25, 500, SPIRAL_SEEDS[i] ^ 0x77).unwrap();
        let (_, u_ring) = predict_with_uncertainty(&art.model, &art.head, &ring.view()).unwrap();
        ratios.push(u_ring.mean().unwrap() / u_test.mean().unwrap());
    }
    let hits = ratios.iter().filter(|&&r| r >= 1.5).count();
    let elapsed = start.elapsed();
    assert!(hits >= 2, "ratios {ratios:?}");
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    pass(
        "ring uncertainty ratio",
        format!("ratios {ratios:?}, {hits}/3 seeds >= 1.5, {elapsed:?}"),
    );
}

#[test]
fn exit_disagreement_reaches_farther_than_ensembles() {
    let mut wins = 0;
    let mut fractions = Vec::new();
    for art in spiral_artifacts() {
        let half = 2.0 * art.radius;
        let grid = gen_ood_grid(&[(-half, half), (-half, half)], 101).unwrap();
        let (_, ens_dis) = tulip::baselines::ensemble_scores(&art.ensemble, &grid.view()).unwrap();
        let sdn_dis = exit_disagreement(&art.model, &grid.view()).unwrap();

        let far: Vec<usize> = (0..grid.nrows())
            .filter(|&i| {
                let row = grid.row(i);
                row.dot(&row).sqrt() > 1.5 * art.radius
            })
            .collect();
        let frac = |dis: &Array1<f64>| {
            let max = dis.iter().cloned().fold(f64::MIN, f64::max);
            far.iter().filter(|&&i| dis[i] > 0.5 * max).count() as f64 / far.len() as f64
        };
        let (fe, fs) = (frac(&ens_dis), frac(&sdn_dis));
        fractions.push((fs, fe));
        if fs > fe {
            wins += 1;
        }
    }
    assert!(wins >= 2, "far-field fractions (exits, ensemble): {fractions:?}");
    pass(
        "far-field disagreement contrast",
        format!("(exits, ensemble) fractions {fractions:?}, {wins}/3 seeds"),
    );
}

#[test]
fn ood_detection_beats_softmax_entropy() {
    let mut tulip_scores = Vec::new();
    let mut entropy_scores = Vec::new();
    for (i, art) in spiral_artifacts().iter().enumerate() {
        let (x_test, _) = art.ds.test_xy().unwrap();
        let far =
            gen_far_field(1.5 * art.radius, 3.0 * art.radius, 2, 500, SPIRAL_SEEDS[i] ^ 0x99)
                .unwrap();

        let (_, u_id) = predict_with_uncertainty(&art.model, &art.head, &x_test.view()).unwrap();
        let (_, u_ood) = predict_with_uncertainty(&art.model, &art.head, &far.view()).unwrap();
        tulip_scores
            .push(auroc(u_id.as_slice().unwrap(), u_ood.as_slice().unwrap()).unwrap());

        let ent = |x: &ArrayView2<f64>| {
            let (logits, _) = art.plain.forward(x, Mode::Eval).unwrap();
            softmax_entropy_batch(&logits.view())
        };
        let (e_id, e_ood) = (ent(&x_test.view()), ent(&far.view()));
        entropy_scores
            .push(auroc(e_id.as_slice().unwrap(), e_ood.as_slice().unwrap()).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mt, me) = (mean(&tulip_scores), mean(&entropy_scores));
    assert!(mt > 0.9, "combined-exit auroc {mt} (per seed {tulip_scores:?})");
    assert!(me < mt, "softmax entropy {me} not below {mt}");
    pass(
        "far-field detection",
        format!("combined exits {mt:.3} vs softmax entropy {me:.3} (3-seed means)"),
    );
}

// ---------------------------------------------------------------- 8

fn severity_accuracy(seed: u64, severity: f64, constrained: bool) -> f64 {
    let base = gen_gaussian_classes(250, 10, 2, 5.0, 1.0, seed).unwrap();
    let ds = split_test(&base, 0.2, seed ^ 0x11).unwrap();
    let spec = ImbalanceSpec::for_severity(severity, 10, 0.8, 0.9).unwrap();
    let ds = apply_imbalance(&ds, &spec, seed ^ 0x22).unwrap();
    let (x, y) = ds.train_xy().unwrap();

    let coefficient = if constrained { 3.0 } else { f64::INFINITY };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x33);
    let gp = GpConfig { rff_dim: 64, ..GpConfig::default() };
    let mut model = build_sngp(2, 2, 64, 10, coefficient, &gp, &mut rng).unwrap();
    train_sdn(
        &mut model,
        &x.view(),
        &y,
        &TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 64,
            lr_schedule: vec![],
            seed: seed ^ 0x44,
        },
        &SdnLossWeights::equal(0),
    )
    .unwrap();

    let (x_test, y_test) = ds.test_xy().unwrap();
    let preds = model.predict(&x_test.view()).unwrap();
    accuracy(&preds, &y_test).unwrap()
}

#[test]
fn norm_constraint_helps_balanced_hurts_imbalanced() {
    let seeds = [0u64, 1, 2];
    let mut delta_low = 0.0;
    let mut delta_full = 0.0;
    for &seed in &seeds {
        let low_c = severity_accuracy(seed, 0.0, true);
        let low_u = severity_accuracy(seed, 0.0, false);
        let full_c = severity_accuracy(seed, 1.0, true);
        let full_u = severity_accuracy(seed, 1.0, false);
        eprintln!(
            "seed {seed}: balanced {low_c:.4} vs {low_u:.4}, full severity {full_c:.4} vs {full_u:.4} (constrained vs plain)"
        );
        delta_low += low_c - low_u;
        delta_full += full_c - full_u;
    }
    delta_low /= seeds.len() as f64;
    delta_full /= seeds.len() as f64;
    assert!(delta_low > 0.0, "balanced delta {delta_low}");
    assert!(delta_full < 0.0, "full-severity delta {delta_full}");
    pass(
        "imbalance trend",
        format!("constrained-minus-plain accuracy: {delta_low:+.4} balanced, {delta_full:+.4} at full severity"),
    );
}

// --------------------------------------------------------------- 10

#[test]
fn combination_head_is_identical_without_stored_labels() {
    let base = gen_spiral(150, 3, 1.0, 0.05, 1010).unwrap();
    let mut ds = split_test(&base, 0.2, 1011).unwrap();
    ds = split_validation(&ds, 0.15, 1012).unwrap();

    let mut scrubbed = ds.clone();
    scrubbed.scrub_validation_labels();
    assert!(
        scrubbed
            .class_counts(tulip::data::Split::Validation)
            .iter()
            .all(|&c| c == 0),
        "labels still present after scrubbing"
    );

    let (x, y) = ds.train_xy().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1013);
    let backbone = mlp(2, &[16, 16, 16], None, &mut rng);
    let gp = GpConfig { rff_dim: 16, ..GpConfig::default() };
    let mut model = SdnModel::new(backbone, 2, 3, &gp, &mut rng).unwrap();
    train_sdn(
        &mut model,
        &x.view(),
        &y,
        &TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 32,
            lr_schedule: vec![],
            seed: 1014,
        },
        &SdnLossWeights::equal(2),
    )
    .unwrap();

    let fit = |d: &Dataset| {
        let head = fit_combination_head(
            &model,
            &d.validation_features().view(),
            None,
            Default::default(),
            Default::default(),
            1e-3,
        )
        .unwrap();
        serde_json::to_vec(&head).unwrap()
    };
    let with_labels = fit(&ds);
    let without_labels = fit(&scrubbed);
    assert_eq!(with_labels, without_labels, "head bytes differ");
    pass(
        "unsupervised fit integrity",
        format!("{} identical head bytes with labels present vs scrubbed", with_labels.len()),
    );
}

// --------------------------------------------------------------- 11

#[test]
fn identical_config_reproduces_report_bytes() {
    use tulip::experiment::{run, ExperimentConfig};
    let toml = r#"
        output_dir = "PLACEHOLDER"
        seeds = [0, 1]

        [dataset]
        kind = "spiral"
        n_per_class = 60

        [estimator]
        kind = "tulip"
        hidden = [16, 16, 16]
        n_internal = 2

        [estimator.gp]
        rff_dim = 32

        [train]
        epochs = 60
        batch_size = 32

        [[eval.ood]]
        name = "far_field"
        kind = "uniform_shell"
        n = 80
    "#;
    let dirs = [
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    ];
    let mut reports = Vec::new();
    for dir in &dirs {
        let mut config = ExperimentConfig::from_toml_str(toml).unwrap();
        config.output_dir = dir.path().join("out");
        config.validate().unwrap();
        run(&config).unwrap();
        let mut bytes = Vec::new();
        for seed in [0, 1] {
            for file in ["report.json", "report.csv"] {
                bytes.push(
                    std::fs::read(config.output_dir.join(format!("seed_{seed}/{file}")))
                        .unwrap(),
                );
            }
        }
        reports.push(bytes);
    }
    assert_eq!(reports[0], reports[1], "report bytes differ between runs");
    let total: usize = reports[0].iter().map(|b| b.len()).sum();
    pass(
        "determinism",
        format!("two runs, {} report files, {total} bytes each, byte-identical", reports[0].len()),
    );
}
