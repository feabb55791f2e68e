//! Feature-preservation diagnostics on a small trained net: fit
//! nonnegative layer weights reproducing input distances, check the
//! recovered constant, and inspect per-layer distortion plus the
//! collapse resistance of the first layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tulip::data::{gen_spiral, split_test};
use tulip::nn::{mlp, train, Loss, OptimizerKind, TrainConfig};
use tulip::preservation::{
    collapse_resistance, distortion, fit_preservation_weights, layer_distances, sample_pairs,
    COLLAPSE_EPSILON,
};

fn main() -> tulip::Result<()> {
    let seed = 5;
    let base = gen_spiral(150, 3, 1.0, 0.05, seed)?;
    let ds = split_test(&base, 0.2, seed + 1)?;
    let (x_train, y_train) = ds.train_xy()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = mlp(2, &[32, 32], Some(3), &mut rng);

    let pairs = sample_pairs(&x_train.view(), 200, seed + 2)?;
    let fit_of = |net: &tulip::nn::Network| -> tulip::Result<_> {
        let (d, dx) = layer_distances(net, &pairs)?;
        fit_preservation_weights(&d.view(), &dx.view())
    };

    let before = fit_of(&net)?;
    train(
        &mut net,
        &x_train.view(),
        &y_train,
        &TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            lr_schedule: vec![],
            seed,
        },
        Loss::CrossEntropy,
    )?;
    let after = fit_of(&net)?;

    for (tag, fit) in [("untrained", &before), ("trained", &after)] {
        println!(
            "{tag:<10} r = {:?}, constant = {:.4}, rms residual = {:.3e}",
            fit.r.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            fit.constant_c,
            fit.residual
        );
    }

    // Ratio of consecutive per-layer distances; 1 means the layer kept
    // the pair exactly as far apart as the one before.
    let profile = distortion(&net, &pairs)?;
    let depth = profile.per_layer_rho.ncols();
    print!("median distortion by layer:");
    for l in 0..depth {
        let mut col: Vec<f64> = profile.per_layer_rho.column(l).to_vec();
        col.sort_by(|a, b| a.total_cmp(b));
        print!(" {:.3}", col[col.len() / 2]);
    }
    println!();

    let resist = collapse_resistance(&net, &pairs, 1, COLLAPSE_EPSILON)?;
    println!(
        "first-layer collapse resistance: {:.3} (fraction of pairs kept apart)",
        resist
    );
    Ok(())
}
