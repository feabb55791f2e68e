//! Trains the norm-constrained residual GP model on Gaussian blobs,
//! then reports the largest singular value of every dense weight
//! matrix. Constrained layers must sit at or below the coefficient no
//! matter how long training ran; the final GP readout is left free.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tulip::baselines::build_sngp;
use tulip::data::{gen_gaussian_classes, split_test};
use tulip::gp::GpConfig;
use tulip::nn::{power_iteration, Layer, OptimizerKind, TrainConfig};
use tulip::sdn::{train_sdn, SdnLossWeights};

fn main() -> tulip::Result<()> {
    let seed = 2;
    let coefficient = 3.0;
    let base = gen_gaussian_classes(150, 4, 2, 6.0, 1.0, seed)?;
    let ds = split_test(&base, 0.2, seed + 1)?;
    let (x_train, y_train) = ds.train_xy()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gp = GpConfig {
        rff_dim: 32,
        ..GpConfig::default()
    };
    let mut model = build_sngp(2, 2, 32, 4, coefficient, &gp, &mut rng)?;
    train_sdn(
        &mut model,
        &x_train.view(),
        &y_train,
        &TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            lr_schedule: vec![],
            seed,
        },
        &SdnLossWeights::equal(0),
    )?;

    println!("layer                       sigma_max  constrained");
    let show = |tag: String, layer: &tulip::nn::DenseLayer| {
        let (sigma, _) = power_iteration(&layer.weights.view(), None, 500, 1e-12);
        println!("{tag:<27} {sigma:>9.4}  {}", layer.spectral.is_some());
    };
    for (i, layer) in model.backbone().layers.iter().enumerate() {
        match layer {
            Layer::Dense(d) => show(format!("layer {i} dense"), d),
            Layer::Residual(block) => {
                for (j, d) in block.inner.iter().enumerate() {
                    show(format!("layer {i} residual inner {j}"), d);
                }
            }
            Layer::Dropout(_) => println!("layer {i} dropout"),
        }
    }
    println!("budget: {coefficient}");
    Ok(())
}
