//! Trains every estimator on the same spiral split and prints one
//! AUROC row each for separating the test split from far-field
//! samples. Deliberately small budgets; expect the single-pass
//! baselines to trail the exit-combining estimator.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tulip::baselines::{
    build_sngp, energy_score_batch, ensemble_scores, mc_dropout_scores, plain_mlp_builder,
    softmax_entropy_batch, train_ensemble,
};
use tulip::combiner::{fit_combination_head, predict_with_uncertainty};
use tulip::data::{gen_far_field, gen_spiral, split_test, split_validation, Dataset};
use tulip::gp::{dempster_shafer_batch, GpConfig};
use tulip::metrics::auroc;
use tulip::nn::{dropout_mlp, mlp, train, Loss, Mode, OptimizerKind, TrainConfig};
use tulip::sdn::{train_sdn, SdnLossWeights, SdnModel};

const SEED: u64 = 11;
const HIDDEN: [usize; 3] = [32, 32, 32];

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        epochs,
        batch_size: 64,
        lr_schedule: vec![],
        seed: SEED,
    }
}

fn report(name: &str, u_id: &[f64], u_ood: &[f64]) -> tulip::Result<()> {
    println!("{name:<22} {:.3}", auroc(u_id, u_ood)?);
    Ok(())
}

fn main() -> tulip::Result<()> {
    let base = gen_spiral(150, 3, 1.0, 0.05, SEED)?;
    let mut ds: Dataset = split_test(&base, 0.2, SEED + 1)?;
    ds = split_validation(&ds, 0.1, SEED + 2)?;
    ds.scrub_validation_labels();

    let (x_train, y_train) = ds.train_xy()?;
    let (x_test, _) = ds.test_xy()?;
    let r = ds.train_radius();
    let far = gen_far_field(1.5 * r, 3.0 * r, 2, 400, SEED + 3)?;
    let x_test = x_test.view();
    let far = far.view();
    let gp = GpConfig {
        rff_dim: 64,
        ..GpConfig::default()
    };

    println!("{:<22} {}", "estimator", "auroc");

    // Plain deterministic net scored two ways.
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut net = mlp(2, &HIDDEN, Some(3), &mut rng);
    train(&mut net, &x_train.view(), &y_train, &train_config(200), Loss::CrossEntropy)?;
    let logits = |x: &ArrayView2<f64>| -> tulip::Result<_> { Ok(net.forward(x, Mode::Eval)?.0) };
    let (l_id, l_ood) = (logits(&x_test)?, logits(&far)?);
    report(
        "softmax_entropy",
        softmax_entropy_batch(&l_id.view()).as_slice().unwrap(),
        softmax_entropy_batch(&l_ood.view()).as_slice().unwrap(),
    )?;
    report(
        "energy",
        energy_score_batch(&l_id.view()).as_slice().unwrap(),
        energy_score_batch(&l_ood.view()).as_slice().unwrap(),
    )?;

    // Six-member ensemble, total uncertainty and disagreement.
    let builder = plain_mlp_builder(2, HIDDEN.to_vec(), 3);
    let ens = train_ensemble(&builder, 6, &x_train.view(), &y_train, &train_config(200), SEED)?;
    let (tot_id, dis_id) = ensemble_scores(&ens, &x_test)?;
    let (tot_ood, dis_ood) = ensemble_scores(&ens, &far)?;
    report("ensemble_total", tot_id.as_slice().unwrap(), tot_ood.as_slice().unwrap())?;
    report("ensemble_disagreement", dis_id.as_slice().unwrap(), dis_ood.as_slice().unwrap())?;

    // Stochastic passes through a net with dropout layers.
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut dnet = dropout_mlp(2, &HIDDEN, Some(3), 0.01, &mut rng)?;
    train(&mut dnet, &x_train.view(), &y_train, &train_config(200), Loss::CrossEntropy)?;
    let (mc_id, _) = mc_dropout_scores(&dnet, &x_test, 10, SEED + 4)?;
    let (mc_ood, _) = mc_dropout_scores(&dnet, &far, 10, SEED + 4)?;
    report("mc_dropout", mc_id.as_slice().unwrap(), mc_ood.as_slice().unwrap())?;

    // Norm-constrained residual net with a single uncertainty head.
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut sngp = build_sngp(2, 2, 32, 3, 3.0, &gp, &mut rng)?;
    train_sdn(&mut sngp, &x_train.view(), &y_train, &train_config(200), &SdnLossWeights::equal(0))?;
    let ds_u = |x: &ArrayView2<f64>| -> tulip::Result<_> {
        Ok(dempster_shafer_batch(&sngp.final_logits(x)?.view()))
    };
    let (s_id, s_ood) = (ds_u(&x_test)?, ds_u(&far)?);
    report("sngp", s_id.as_slice().unwrap(), s_ood.as_slice().unwrap())?;

    // Exits on layers 1 and 2 plus a switch-fitted combination head.
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let backbone = mlp(2, &HIDDEN, None, &mut rng);
    let mut model = SdnModel::new(backbone, 2, 3, &gp, &mut rng)?;
    train_sdn(&mut model, &x_train.view(), &y_train, &train_config(200), &SdnLossWeights::equal(2))?;
    let x_val = ds.validation_features();
    let head = fit_combination_head(
        &model,
        &x_val.view(),
        None,
        Default::default(),
        Default::default(),
        1e-3,
    )?;
    let (_, u_id) = predict_with_uncertainty(&model, &head, &x_test)?;
    let (_, u_ood) = predict_with_uncertainty(&model, &head, &far)?;
    report("tulip", u_id.as_slice().unwrap(), u_ood.as_slice().unwrap())?;
    Ok(())
}
