//! End-to-end single-pass uncertainty on the three-arm spiral: train a
//! backbone with internal classifiers, fit the combination head on
//! unlabeled held-out rows, then compare uncertainty on the test split
//! against a ring far outside the data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tulip::combiner::{fit_combination_head, predict_with_uncertainty};
use tulip::data::{gen_ring, gen_spiral, split_test, split_validation};
use tulip::gp::GpConfig;
use tulip::metrics::{accuracy, auroc};
use tulip::nn::{mlp, OptimizerKind, TrainConfig};
use tulip::sdn::{train_sdn, SdnLossWeights, SdnModel, SwitchScope};

fn main() -> tulip::Result<()> {
    let seed = 7;

    let base = gen_spiral(200, 3, 1.0, 0.05, seed)?;
    let mut ds = split_test(&base, 0.2, seed + 1)?;
    ds = split_validation(&ds, 0.1, seed + 2)?;
    ds.scrub_validation_labels();

    // Three hidden layers with exits after the first two; the final
    // head sits on the output layer.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = mlp(2, &[64, 64, 64], None, &mut rng);
    let mut model = SdnModel::new(backbone, 2, 3, &GpConfig::default(), &mut rng)?;

    let (x_train, y_train) = ds.train_xy()?;
    let config = TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        epochs: 300,
        batch_size: 64,
        lr_schedule: vec![],
        seed,
    };
    let losses = train_sdn(
        &mut model,
        &x_train.view(),
        &y_train,
        &config,
        &SdnLossWeights::equal(2),
    )?;
    println!(
        "trained {} epochs, loss {:.4} -> {:.4}",
        losses.len(),
        losses[0],
        losses.last().unwrap()
    );

    // The combination head never sees labels: it is fitted on
    // prediction switches between exits, counted on held-out features.
    let x_val = ds.validation_features();
    let head = fit_combination_head(
        &model,
        &x_val.view(),
        None,
        Default::default(),
        SwitchScope::IcsOnly,
        1e-3,
    )?;
    println!(
        "combination head: r = {:?}, switch threshold n_s = {}",
        head.r, head.n_s
    );

    let (x_test, y_test) = ds.test_xy()?;
    let (preds, u_test) = predict_with_uncertainty(&model, &head, &x_test.view())?;
    println!("test accuracy: {:.3}", accuracy(&preds, &y_test)?);

    let radius = ds.train_radius();
    let ring = gen_ring(2.0 * radius, 0.25, 400, seed + 3)?;
    let (_, u_ring) = predict_with_uncertainty(&model, &head, &ring.view())?;

    let mean = |u: &ndarray::Array1<f64>| u.mean().unwrap();
    println!(
        "mean uncertainty: test {:.4}, ring at 2x radius {:.4} (ratio {:.2})",
        mean(&u_test),
        mean(&u_ring),
        mean(&u_ring) / mean(&u_test)
    );

    let score = auroc(u_test.as_slice().unwrap(), u_ring.as_slice().unwrap())?;
    println!("in- vs out-of-distribution AUROC: {score:.3}");
    Ok(())
}
