//! Reference uncertainty estimators: predictive-entropy and energy
//! scores on single networks, deep ensembles with their disagreement
//! decomposition, stochastic-dropout scoring, and the single-model
//! SN-plus-GP baseline.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::gp::GpConfig;
use crate::nn::{
    log_softmax, logsumexp, mlp, softmax, train, Activation, DenseLayer, Layer, Loss, Mode,
    Network, ResidualBlock, TrainConfig,
};
use crate::sdn::SdnModel;

/// Entropy of the softmax distribution, in nats. Overflow-safe; the
/// 0 * ln 0 limit contributes zero.
pub fn softmax_entropy(logits: &ArrayView1<f64>) -> f64 {
    let two_d = logits.view().insert_axis(ndarray::Axis(0));
    let logp = log_softmax(&two_d);
    -logp
        .row(0)
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * lp
            }
        })
        .sum::<f64>()
}

pub fn softmax_entropy_batch(logits: &ArrayView2<f64>) -> Array1<f64> {
    let logp = log_softmax(logits);
    Array1::from_iter(logp.rows().into_iter().map(|row| {
        -row.iter()
            .map(|&lp| {
                let p = lp.exp();
                if p == 0.0 {
                    0.0
                } else {
                    p * lp
                }
            })
            .sum::<f64>()
    }))
}

/// Negative log of the unnormalized density: -ln sum_k exp(g_k).
/// Higher means more uncertain.
pub fn energy_score(logits: &ArrayView1<f64>) -> f64 {
    -logsumexp(logits)
}

pub fn energy_score_batch(logits: &ArrayView2<f64>) -> Array1<f64> {
    Array1::from_iter(logits.rows().into_iter().map(|row| -logsumexp(&row)))
}

fn entropy_of_probs(p: &ArrayView1<f64>) -> f64 {
    -p.iter()
        .map(|&v| if v == 0.0 { 0.0 } else { v * v.ln() })
        .sum::<f64>()
}

/// Total predictive entropy and its disagreement part for a stack of
/// per-member probability matrices: total = H[mean p], disagreement =
/// total - mean member entropy. Both are clamped at zero against
/// rounding.
pub fn decompose_entropy(member_probs: &[Array2<f64>]) -> Result<(Array1<f64>, Array1<f64>)> {
    if member_probs.is_empty() {
        return Err(Error::InvalidArgument(
            "entropy decomposition needs at least one member".into(),
        ));
    }
    let n = member_probs[0].nrows();
    let k = member_probs[0].ncols();
    for (m, probs) in member_probs.iter().enumerate() {
        if probs.nrows() != n || probs.ncols() != k {
            return Err(Error::ShapeMismatch(format!(
                "member {m} is {}x{}, expected {n}x{k}",
                probs.nrows(),
                probs.ncols()
            )));
        }
    }
    let count = member_probs.len() as f64;
    let mut total = Array1::<f64>::zeros(n);
    let mut disagreement = Array1::<f64>::zeros(n);
    let mut mean = Array1::<f64>::zeros(k);
    for i in 0..n {
        mean.fill(0.0);
        let mut member_entropy = 0.0;
        for probs in member_probs {
            let row = probs.row(i);
            mean += &row;
            member_entropy += entropy_of_probs(&row);
        }
        mean /= count;
        member_entropy /= count;
        let h_total = entropy_of_probs(&mean.view());
        total[i] = h_total.max(0.0);
        disagreement[i] = (h_total - member_entropy).max(0.0);
    }
    Ok((total, disagreement))
}

/// Independently trained copies of one architecture.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Network>,
}

impl Ensemble {
    pub fn new(members: Vec<Network>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs at least two members, got {}",
                members.len()
            )));
        }
        let in_dim = members[0].input_dim();
        let out_dim = members[0].output_dim();
        for (i, m) in members.iter().enumerate() {
            if m.input_dim() != in_dim || m.output_dim() != out_dim {
                return Err(Error::UnsupportedConfiguration(format!(
                    "member {i} maps {} -> {}, expected {} -> {}",
                    m.input_dim(),
                    m.output_dim(),
                    in_dim,
                    out_dim
                )));
            }
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    /// Majority vote is not used; prediction is the argmax of the mean
    /// predictive distribution.
    pub fn predict(&self, x: &ArrayView2<f64>) -> Result<Vec<usize>> {
        let probs = self.mean_probs(x)?;
        Ok(crate::sdn::argmax_rows(&probs))
    }

    pub fn mean_probs(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut mean: Option<Array2<f64>> = None;
        for member in &self.members {
            let (logits, _) = member.forward(x, Mode::Eval)?;
            let probs = softmax(&logits.view());
            mean = Some(match mean {
                None => probs,
                Some(acc) => acc + probs,
            });
        }
        Ok(mean.expect("at least two members") / self.members.len() as f64)
    }
}

/// Trains `n_members` fresh networks from `builder`, each with its own
/// derived seed for initialization and batching. Members train in
/// parallel; the result is independent of scheduling.
pub fn train_ensemble(
    builder: &(dyn Fn(&mut ChaCha8Rng) -> Network + Sync),
    n_members: usize,
    x: &ArrayView2<f64>,
    labels: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<Ensemble> {
    if n_members < 2 {
        return Err(Error::InvalidArgument(format!(
            "an ensemble needs at least two members, got {n_members}"
        )));
    }
    let members: Vec<Result<Network>> = (0..n_members)
        .into_par_iter()
        .map(|i| {
            let member_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(member_seed, 0));
            let mut net = builder(&mut rng);
            let cfg = TrainConfig {
                seed: derive_seed(member_seed, 1),
                ..config.clone()
            };
            train(&mut net, x, labels, &cfg, Loss::CrossEntropy)?;
            Ok(net)
        })
        .collect();
    Ensemble::new(members.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Entropy decomposition over the ensemble members' predictive
/// distributions: (total, disagreement) per sample.
pub fn ensemble_scores(ens: &Ensemble, x: &ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let mut member_probs = Vec::with_capacity(ens.len());
    for member in ens.members() {
        let (logits, _) = member.forward(x, Mode::Eval)?;
        member_probs.push(softmax(&logits.view()));
    }
    decompose_entropy(&member_probs)
}

fn stochastic_probs(
    net: &Network,
    x: &ArrayView2<f64>,
    passes: usize,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    if !net.has_dropout() {
        return Err(Error::UnsupportedConfiguration(
            "stochastic scoring needs at least one dropout layer".into(),
        ));
    }
    if passes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two stochastic passes, got {passes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut member_probs = Vec::with_capacity(passes);
    for _ in 0..passes {
        let (logits, _) = net.forward(x, Mode::Train(&mut rng))?;
        member_probs.push(softmax(&logits.view()));
    }
    Ok(member_probs)
}

/// Entropy decomposition over stochastic forward passes with dropout
/// kept active. Deterministic under the seed.
pub fn mc_dropout_scores(
    net: &Network,
    x: &ArrayView2<f64>,
    passes: usize,
    seed: u64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    decompose_entropy(&stochastic_probs(net, x, passes, seed)?)
}

/// Predictive distribution averaged over the same stochastic passes
/// `mc_dropout_scores` uses for a given seed.
pub fn mc_dropout_mean_probs(
    net: &Network,
    x: &ArrayView2<f64>,
    passes: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let member_probs = stochastic_probs(net, x, passes, seed)?;
    let mut mean = Array2::<f64>::zeros(member_probs[0].raw_dim());
    for p in &member_probs {
        mean += p;
    }
    mean /= passes as f64;
    Ok(mean)
}

/// Jensen-gap disagreement across an uncertainty-aware multi-exit
/// model's exits (internal classifiers plus the final head), treating
/// each exit as an ensemble member.
pub fn exit_disagreement(model: &SdnModel, x: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let exits = model.exit_logits(x)?;
    if exits.len() < 2 {
        return Err(Error::UnsupportedConfiguration(
            "inter-exit disagreement needs at least two exits".into(),
        ));
    }
    let probs: Vec<Array2<f64>> = exits.iter().map(|l| softmax(&l.view())).collect();
    Ok(decompose_entropy(&probs)?.1)
}

/// Residual backbone under a spectral-norm budget with a GP output
/// head: the single-forward-pass baseline. A non-finite coefficient
/// disables the constraint (plain residual network plus head). The
/// returned model has no internal classifiers.
pub fn build_sngp(
    input_dim: usize,
    n_resblocks: usize,
    width: usize,
    n_classes: usize,
    sn_coefficient: f64,
    gp: &GpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SdnModel> {
    if input_dim == 0 || width == 0 {
        return Err(Error::InvalidArgument(
            "input dimension and width must be positive".into(),
        ));
    }
    if n_resblocks == 0 {
        return Err(Error::InvalidArgument(
            "need at least one residual block".into(),
        ));
    }
    if sn_coefficient.is_nan() || sn_coefficient <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "spectral coefficient must be positive (infinite disables), got {sn_coefficient}"
        )));
    }
    let constrain = |layer: DenseLayer, rng: &mut ChaCha8Rng| {
        if sn_coefficient.is_finite() {
            layer.with_spectral_norm(sn_coefficient, rng)
        } else {
            layer
        }
    };
    let mut layers = Vec::with_capacity(n_resblocks + 1);
    // The stem changes width, so it lives outside the residual blocks;
    // it is constrained like everything else.
    layers.push(Layer::Dense(constrain(
        DenseLayer::new(input_dim, width, Activation::Relu, rng),
        rng,
    )));
    for _ in 0..n_resblocks {
        let inner = constrain(DenseLayer::new(width, width, Activation::Relu, rng), rng);
        layers.push(Layer::Residual(ResidualBlock::new(vec![inner])?));
    }
    let backbone = Network::new(layers, Vec::new())?;
    SdnModel::new(backbone, 0, n_classes, gp, rng)
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    format_version: u32,
    n_members: usize,
    files: Vec<String>,
}

const ENSEMBLE_FORMAT_VERSION: u32 = 1;

/// Writes one weight file per member plus a manifest into `dir`.
pub fn save_ensemble(ens: &Ensemble, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(ens.len());
    for (i, member) in ens.members().iter().enumerate() {
        let name = format!("member_{i:03}.json");
        crate::nn::save_network(member, &dir.join(&name))?;
        files.push(name);
    }
    let manifest = EnsembleManifest {
        format_version: ENSEMBLE_FORMAT_VERSION,
        n_members: ens.len(),
        files,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<Ensemble> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: EnsembleManifest = serde_json::from_str(&text)?;
    if manifest.format_version != ENSEMBLE_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported ensemble format version {}",
            manifest.format_version
        )));
    }
    if manifest.files.len() != manifest.n_members {
        return Err(Error::Schema(format!(
            "manifest lists {} files for {} members",
            manifest.files.len(),
            manifest.n_members
        )));
    }
    let members = manifest
        .files
        .iter()
        .map(|f| crate::nn::load_network(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members)
}

/// Builders for the toy architectures that the estimators run on.
pub fn plain_mlp_builder(
    input_dim: usize,
    hidden: Vec<usize>,
    n_classes: usize,
) -> impl Fn(&mut ChaCha8Rng) -> Network + Sync {
    move |rng| mlp(input_dim, &hidden, Some(n_classes), rng)
}
