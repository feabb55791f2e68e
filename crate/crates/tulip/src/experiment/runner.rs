//! Executes validated experiment configurations: trains the requested
//! estimator per seed, evaluates it against configured OOD sets, and
//! writes reports plus a manifest describing every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    build_sngp, energy_score_batch, ensemble_scores, exit_disagreement, mc_dropout_mean_probs,
    mc_dropout_scores, plain_mlp_builder, softmax_entropy_batch, train_ensemble, Ensemble,
};
use crate::combiner::{fit_combination_head, predict_with_uncertainty, CombinationHead};
use crate::data::{
    apply_imbalance, gen_far_field, gen_gaussian_classes, gen_ood_grid, gen_ring, gen_spiral,
    load_csv, split_test, split_validation, Dataset, ImbalanceSpec,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::gp::dempster_shafer_batch;
use crate::metrics::{accuracy, auroc, ece, surface_bins, EstimatorKind, EvalReport};
use crate::nn::{dropout_mlp, mlp, softmax, train, Loss, Mode, Network};
use crate::sdn::{argmax_rows, train_sdn, SdnLossWeights, SdnModel};

use super::config::{DatasetKind, ExperimentConfig, OodKind, OodSpec, SurfaceSpec};

// Independent seed streams per stage so that, for example, adding an
// OOD set never perturbs dataset generation or training.
const STREAM_DATASET: u64 = 0;
const STREAM_MODEL: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_OOD: u64 = 3;
const STREAM_SCORING: u64 = 4;
const STREAM_ENSEMBLE: u64 = 5;

/// Artifacts written for one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub ok: bool,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Written once per invocation; records what ran and where everything
/// landed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config_sha256: String,
    pub versions: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub output_dir: PathBuf,
    pub seeds: Vec<SeedEntry>,
    /// Aggregate files (summary, surfaces, maps), relative paths.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn all_ok(&self) -> bool {
        self.seeds.iter().all(|s| s.ok)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let canonical = config.canonical_toml()?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(format!("{digest:x}"))
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([(
        env!("CARGO_PKG_NAME").to_string(),
        env!("CARGO_PKG_VERSION").to_string(),
    )])
}

/// Generates, splits, reduces, and label-scrubs the dataset for one
/// seed. `imbalance_override` replaces the config's imbalance table
/// (used by the severity sweep).
fn build_dataset(
    config: &ExperimentConfig,
    seed: u64,
    imbalance_override: Option<&ImbalanceSpec>,
) -> Result<Dataset> {
    let spec = &config.dataset;
    let ds_seed = derive_seed(seed, STREAM_DATASET);
    let base = match spec.dataset_kind()? {
        DatasetKind::Spiral => gen_spiral(
            spec.n_per_class,
            spec.n_classes,
            spec.turns,
            spec.noise_std,
            ds_seed,
        )?,
        DatasetKind::Gaussian => gen_gaussian_classes(
            spec.n_per_class,
            spec.n_classes,
            spec.dim,
            spec.center_spread,
            spec.cluster_std,
            ds_seed,
        )?,
        DatasetKind::Csv => {
            let path = spec
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.path: required when kind = \"csv\"".into()))?;
            load_csv(path, &spec.label_column)?
        }
    };
    let mut ds = split_test(&base, spec.test_fraction, derive_seed(ds_seed, 1))?;
    let imbalance = imbalance_override.or(spec.imbalance.as_ref());
    if let Some(imb) = imbalance {
        ds = apply_imbalance(&ds, imb, derive_seed(ds_seed, 3))?;
    }
    if spec.validation_fraction > 0.0 {
        ds = split_validation(&ds, spec.validation_fraction, derive_seed(ds_seed, 2))?;
    }
    ds.scrub_validation_labels();
    Ok(ds)
}

/// A trained estimator behind a uniform scoring interface.
enum Fitted {
    Plain { net: Network, energy: bool },
    Members { ens: Ensemble, disagreement: bool },
    Dropout { net: Network, passes: usize, score_seed: u64 },
    GpResidual { model: SdnModel },
    Tulip { model: SdnModel, head: CombinationHead },
}

fn row_max(probs: &Array2<f64>) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

impl Fitted {
    fn predict(&self, x: &ArrayView2<f64>) -> Result<Vec<usize>> {
        match self {
            Fitted::Plain { net, .. } => {
                let (logits, _) = net.forward(x, Mode::Eval)?;
                Ok(argmax_rows(&logits))
            }
            Fitted::Members { ens, .. } => ens.predict(x),
            Fitted::Dropout { net, passes, score_seed } => {
                let mean = mc_dropout_mean_probs(net, x, *passes, *score_seed)?;
                Ok(argmax_rows(&mean))
            }
            Fitted::GpResidual { model } | Fitted::Tulip { model, .. } => model.predict(x),
        }
    }

    /// Max predictive probability of the final head, for calibration.
    fn confidence(&self, x: &ArrayView2<f64>) -> Result<Vec<f64>> {
        match self {
            Fitted::Plain { net, .. } => {
                let (logits, _) = net.forward(x, Mode::Eval)?;
                Ok(row_max(&softmax(&logits.view())))
            }
            Fitted::Members { ens, .. } => Ok(row_max(&ens.mean_probs(x)?)),
            Fitted::Dropout { net, passes, score_seed } => {
                Ok(row_max(&mc_dropout_mean_probs(net, x, *passes, *score_seed)?))
            }
            Fitted::GpResidual { model } | Fitted::Tulip { model, .. } => {
                let logits = model.final_logits(x)?;
                Ok(row_max(&softmax(&logits.view())))
            }
        }
    }

    fn uncertainty(&self, x: &ArrayView2<f64>) -> Result<Vec<f64>> {
        match self {
            Fitted::Plain { net, energy } => {
                let (logits, _) = net.forward(x, Mode::Eval)?;
                let scores = if *energy {
                    energy_score_batch(&logits.view())
                } else {
                    softmax_entropy_batch(&logits.view())
                };
                Ok(scores.to_vec())
            }
            Fitted::Members { ens, disagreement } => {
                let (total, dis) = ensemble_scores(ens, x)?;
                Ok(if *disagreement { dis } else { total }.to_vec())
            }
            Fitted::Dropout { net, passes, score_seed } => {
                let (total, _) = mc_dropout_scores(net, x, *passes, *score_seed)?;
                Ok(total.to_vec())
            }
            Fitted::GpResidual { model } => {
                let logits = model.final_logits(x)?;
                Ok(dempster_shafer_batch(&logits.view()).to_vec())
            }
            Fitted::Tulip { model, head } => {
                Ok(predict_with_uncertainty(model, head, x)?.1.to_vec())
            }
        }
    }
}

fn fit_estimator(config: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<Fitted> {
    let est = &config.estimator;
    let kind = est.estimator_kind()?;
    let (x_train, y_train) = ds.train_xy()?;
    let x_train = x_train.view();
    let d = ds.dim();
    let k = ds.n_classes();
    let model_seed = derive_seed(seed, STREAM_MODEL);
    let train_cfg = config.train.to_train_config(derive_seed(seed, STREAM_TRAIN))?;
    match kind {
        EstimatorKind::SoftmaxEntropy | EstimatorKind::Energy => {
            let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
            let mut net = mlp(d, &est.hidden, Some(k), &mut rng);
            train(&mut net, &x_train, &y_train, &train_cfg, Loss::CrossEntropy)?;
            Ok(Fitted::Plain { net, energy: kind == EstimatorKind::Energy })
        }
        EstimatorKind::EnsembleTotal | EstimatorKind::EnsembleDisagreement => {
            let builder = plain_mlp_builder(d, est.hidden.clone(), k);
            let ens = train_ensemble(
                &builder,
                est.n_members,
                &x_train,
                &y_train,
                &train_cfg,
                model_seed,
            )?;
            Ok(Fitted::Members {
                ens,
                disagreement: kind == EstimatorKind::EnsembleDisagreement,
            })
        }
        EstimatorKind::McDropout => {
            let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
            let mut net = dropout_mlp(d, &est.hidden, Some(k), est.dropout_rate, &mut rng)?;
            train(&mut net, &x_train, &y_train, &train_cfg, Loss::CrossEntropy)?;
            Ok(Fitted::Dropout {
                net,
                passes: est.passes,
                score_seed: derive_seed(seed, STREAM_SCORING),
            })
        }
        EstimatorKind::Sngp => {
            let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
            let mut model = build_sngp(
                d,
                est.n_resblocks,
                est.width,
                k,
                est.sn_coefficient,
                &est.gp.to_config(),
                &mut rng,
            )?;
            train_sdn(&mut model, &x_train, &y_train, &train_cfg, &SdnLossWeights::equal(0))?;
            Ok(Fitted::GpResidual { model })
        }
        EstimatorKind::Tulip => {
            let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
            let backbone = mlp(d, &est.hidden, None, &mut rng);
            let mut model =
                SdnModel::new(backbone, est.n_internal, k, &est.gp.to_config(), &mut rng)?;
            train_sdn(
                &mut model,
                &x_train,
                &y_train,
                &train_cfg,
                &SdnLossWeights::equal(est.n_internal),
            )?;
            let x_val = ds.validation_features();
            if x_val.nrows() == 0 {
                return Err(Error::InvalidArgument(
                    "validation split is empty; the combination head needs held-out rows".into(),
                ));
            }
            let head = fit_combination_head(
                &model,
                &x_val.view(),
                est.combiner.n_switches,
                est.combiner.polarity,
                est.combiner.scope,
                est.combiner.l2,
            )?;
            Ok(Fitted::Tulip { model, head })
        }
    }
}

fn build_ood_set(spec: &OodSpec, radius: f64, dim: usize, seed: u64) -> Result<Array2<f64>> {
    match spec.ood_kind()? {
        OodKind::UniformShell => gen_far_field(
            spec.inner_scale * radius,
            spec.outer_scale * radius,
            dim,
            spec.n,
            seed,
        ),
        OodKind::Ring => {
            if dim != 2 {
                return Err(Error::UnsupportedConfiguration(format!(
                    "ring set `{}` needs 2-D inputs, dataset has {dim}",
                    spec.name
                )));
            }
            gen_ring(spec.radius_scale * radius, spec.width, spec.n, seed)
        }
        OodKind::Grid => {
            let half = spec.margin_scale * radius;
            gen_ood_grid(&vec![(-half, half); dim], spec.resolution)
        }
    }
}

fn evaluate(
    fitted: &Fitted,
    ds: &Dataset,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<EvalReport> {
    let (x_test, y_test) = ds.test_xy()?;
    let x_test = x_test.view();
    let preds = fitted.predict(&x_test)?;
    let acc = accuracy(&preds, &y_test)?;
    let correct: Vec<bool> = preds.iter().zip(&y_test).map(|(p, t)| p == t).collect();
    let conf = fitted.confidence(&x_test)?;
    let calibration = ece(&conf, &correct, config.eval.ece_bins)?;
    let u_id = fitted.uncertainty(&x_test)?;

    let radius = ds.train_radius();
    let ood_seed = derive_seed(seed, STREAM_OOD);
    let mut auroc_by_ood = BTreeMap::new();
    let mut n_ood = 0;
    for (i, set) in config.eval.ood.iter().enumerate() {
        let points = build_ood_set(set, radius, ds.dim(), derive_seed(ood_seed, i as u64))?;
        let u_ood = fitted.uncertainty(&points.view())?;
        n_ood += u_ood.len();
        auroc_by_ood.insert(set.name.clone(), auroc(&u_id, &u_ood)?);
    }
    let overall = auroc_by_ood.values().sum::<f64>() / auroc_by_ood.len() as f64;

    Ok(EvalReport {
        estimator: config.estimator.estimator_kind()?,
        accuracy: acc,
        auroc: overall,
        ece: calibration,
        n_id: preds.len(),
        n_ood,
        auroc_by_ood,
    })
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<(EvalReport, Vec<String>)> {
    let ds = build_dataset(config, seed, None)?;
    let fitted = fit_estimator(config, &ds, seed)?;
    let report = evaluate(&fitted, &ds, config, seed)?;
    let rel_dir = format!("seed_{seed}");
    let dir = config.output_dir.join(&rel_dir);
    fs::create_dir_all(&dir)?;
    report.save_json(&dir.join("report.json"))?;
    report.save_csv(&dir.join("report.csv"))?;
    Ok((
        report,
        vec![
            format!("{rel_dir}/report.json"),
            format!("{rel_dir}/report.csv"),
        ],
    ))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_summary(path: &Path, reports: &[&EvalReport]) -> Result<()> {
    let mut rows: Vec<(String, Vec<f64>)> = vec![
        ("accuracy".into(), reports.iter().map(|r| r.accuracy).collect()),
        ("auroc".into(), reports.iter().map(|r| r.auroc).collect()),
        ("ece".into(), reports.iter().map(|r| r.ece).collect()),
    ];
    for name in reports[0].auroc_by_ood.keys() {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.auroc_by_ood.get(name).copied())
            .collect();
        rows.push((format!("auroc.{name}"), values));
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "metric,mean,std,n_seeds")?;
    for (metric, values) in rows {
        let (mean, std) = mean_std(&values);
        writeln!(out, "{metric},{mean},{std},{}", values.len())?;
    }
    out.flush()?;
    Ok(())
}

fn assemble_manifest(
    config: &ExperimentConfig,
    command: &str,
    start: Instant,
    seeds: Vec<SeedEntry>,
    files: Vec<String>,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        format_version: 1,
        command: command.into(),
        config_sha256: config_hash(config)?,
        versions: versions(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        output_dir: config.output_dir.clone(),
        seeds,
        files,
    };
    manifest.save_json(&config.output_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Full protocol: per seed, build the dataset, train the estimator,
/// fit the combination head where applicable, evaluate, and write
/// reports. Seeds run concurrently and fail independently; the summary
/// aggregates whichever seeds succeeded.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    fs::create_dir_all(&config.output_dir)?;
    let outcomes: Vec<(u64, Result<(EvalReport, Vec<String>)>)> = config
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(config, seed)))
        .collect();

    let mut entries = Vec::new();
    let mut reports = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok((report, files)) => {
                reports.push(report);
                entries.push(SeedEntry { seed, ok: true, files, error: None });
            }
            Err(e) => entries.push(SeedEntry {
                seed,
                ok: false,
                files: Vec::new(),
                error: Some(e.to_string()),
            }),
        }
    }
    let mut files = Vec::new();
    if !reports.is_empty() {
        let refs: Vec<&EvalReport> = reports.iter().collect();
        write_summary(&config.output_dir.join("summary.csv"), &refs)?;
        files.push("summary.csv".into());
    }
    assemble_manifest(config, "run", start, entries, files)
}

/// One model's accumulated surface inputs across seeds and severities.
#[derive(Default)]
struct SurfaceAccum {
    severities: Vec<f64>,
    uncertainties: Vec<f64>,
    correct: Vec<bool>,
    /// (severity, seed, accuracy, n_test) rows.
    accuracy_rows: Vec<(f64, u64, f64, usize)>,
}

fn surface_cell(
    config: &ExperimentConfig,
    spec: &SurfaceSpec,
    seed: u64,
    severity: f64,
    constrained: bool,
) -> Result<(Vec<f64>, Vec<bool>, f64)> {
    let est = &config.estimator;
    let ds_plain = build_dataset_for_severity(config, spec, seed, severity)?;
    let (x_train, y_train) = ds_plain.train_xy()?;
    let k = ds_plain.n_classes();
    let coefficient = if constrained { est.sn_coefficient } else { f64::INFINITY };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_MODEL));
    let mut model = build_sngp(
        ds_plain.dim(),
        est.n_resblocks,
        est.width,
        k,
        coefficient,
        &est.gp.to_config(),
        &mut rng,
    )?;
    let train_cfg = config.train.to_train_config(derive_seed(seed, STREAM_TRAIN))?;
    train_sdn(&mut model, &x_train.view(), &y_train, &train_cfg, &SdnLossWeights::equal(0))?;
    let (x_test, y_test) = ds_plain.test_xy()?;
    let preds = model.predict(&x_test.view())?;
    let correct: Vec<bool> = preds.iter().zip(&y_test).map(|(p, t)| p == t).collect();
    let acc = accuracy(&preds, &y_test)?;
    let logits = model.final_logits(&x_test.view())?;
    let uncertainties = dempster_shafer_batch(&logits.view()).to_vec();
    Ok((uncertainties, correct, acc))
}

fn build_dataset_for_severity(
    config: &ExperimentConfig,
    spec: &SurfaceSpec,
    seed: u64,
    severity: f64,
) -> Result<Dataset> {
    // Class count must be known before the reduction spec exists; for
    // CSV sources that means generating the base once. Severity 0 maps
    // to the identity spec, keeping the benchmark untouched.
    let n_classes = match config.dataset.known_dim() {
        Some(_) => config.dataset.n_classes,
        None => build_dataset(config, seed, None)?.n_classes(),
    };
    let imbalance = ImbalanceSpec::for_severity(
        severity,
        n_classes,
        spec.train_reduction,
        spec.test_reduction,
    )?;
    build_dataset(config, seed, Some(&imbalance))
}

/// Severity sweep: trains the spectral-norm-constrained and
/// unconstrained residual GP models at every severity and seed, then
/// writes uncertainty-binned accuracy/count surfaces per model plus a
/// per-run accuracy table.
pub fn surface(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let spec = config
        .surface
        .clone()
        .ok_or_else(|| Error::Config("surface: section required for the severity sweep".into()))?;
    let start = Instant::now();
    fs::create_dir_all(&config.output_dir)?;
    let mut severities = spec.severities.clone();
    severities.sort_by(|a, b| a.partial_cmp(b).expect("validated finite"));
    severities.dedup();

    let mut tasks = Vec::new();
    for &seed in &config.seeds {
        for &severity in &severities {
            for constrained in [true, false] {
                tasks.push((seed, severity, constrained));
            }
        }
    }
    let outcomes: Vec<_> = tasks
        .par_iter()
        .map(|&(seed, severity, constrained)| {
            (
                seed,
                severity,
                constrained,
                surface_cell(config, &spec, seed, severity, constrained),
            )
        })
        .collect();

    let mut constrained_acc = SurfaceAccum::default();
    let mut unconstrained_acc = SurfaceAccum::default();
    let mut errors: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for (seed, severity, constrained, outcome) in outcomes {
        let accum = if constrained { &mut constrained_acc } else { &mut unconstrained_acc };
        match outcome {
            Ok((uncertainties, correct, acc)) => {
                accum.accuracy_rows.push((severity, seed, acc, correct.len()));
                accum.severities.extend(std::iter::repeat(severity).take(correct.len()));
                accum.uncertainties.extend(uncertainties);
                accum.correct.extend(correct);
            }
            Err(e) => errors.entry(seed).or_default().push(format!(
                "severity {severity} ({}): {e}",
                if constrained { "constrained" } else { "unconstrained" }
            )),
        }
    }

    let mut files = Vec::new();
    for (accum, name) in [
        (&constrained_acc, "surface_constrained.csv"),
        (&unconstrained_acc, "surface_unconstrained.csv"),
    ] {
        if accum.severities.is_empty() {
            continue;
        }
        let grid = surface_bins(
            &accum.severities,
            &accum.uncertainties,
            &accum.correct,
            config.eval.surface_bins,
        )?;
        grid.save_csv(&config.output_dir.join(name))?;
        files.push(name.to_string());
    }
    if !constrained_acc.accuracy_rows.is_empty() || !unconstrained_acc.accuracy_rows.is_empty() {
        let name = "accuracy_by_severity.csv";
        let mut out = std::io::BufWriter::new(fs::File::create(config.output_dir.join(name))?);
        writeln!(out, "model,severity,seed,accuracy,n_test")?;
        for (accum, model) in [
            (&constrained_acc, "constrained"),
            (&unconstrained_acc, "unconstrained"),
        ] {
            for &(severity, seed, acc, n) in &accum.accuracy_rows {
                writeln!(out, "{model},{severity},{seed},{acc},{n}")?;
            }
        }
        out.flush()?;
        files.push(name.to_string());
    }

    let entries = config
        .seeds
        .iter()
        .map(|&seed| match errors.get(&seed) {
            Some(msgs) => SeedEntry {
                seed,
                ok: false,
                files: Vec::new(),
                error: Some(msgs.join("; ")),
            },
            None => SeedEntry { seed, ok: true, files: Vec::new(), error: None },
        })
        .collect();
    assemble_manifest(config, "surface", start, entries, files)
}

fn write_point_csv(path: &Path, points: &Array2<f64>, values: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "x0,x1,disagreement")?;
    for (row, v) in points.rows().into_iter().zip(values) {
        writeln!(out, "{},{},{v}", row[0], row[1])?;
    }
    out.flush()?;
    Ok(())
}

/// Trains a deep ensemble and a multi-exit model on the same 2-D data,
/// then scores Jensen-gap disagreement for both over a regular lattice
/// for external plotting.
pub fn disagreement_map(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let est = &config.estimator;
    if est.n_internal == 0 {
        return Err(Error::Config(
            "estimator.n_internal: inter-exit disagreement needs at least one internal classifier"
                .into(),
        ));
    }
    if est.n_internal >= est.hidden.len() {
        return Err(Error::Config(format!(
            "estimator.n_internal: cannot place {} internal classifiers in a depth-{} backbone",
            est.n_internal,
            est.hidden.len()
        )));
    }
    let map = config.map.clone().unwrap_or_default();
    let start = Instant::now();
    fs::create_dir_all(&config.output_dir)?;
    let seed = config.seeds[0];
    let ds = build_dataset(config, seed, None)?;
    if ds.dim() != 2 {
        return Err(Error::UnsupportedConfiguration(format!(
            "disagreement maps need 2-D inputs, dataset has {} dimensions",
            ds.dim()
        )));
    }
    let (x_train, y_train) = ds.train_xy()?;
    let k = ds.n_classes();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_MODEL));
    let backbone = mlp(2, &est.hidden, None, &mut rng);
    let mut model = SdnModel::new(backbone, est.n_internal, k, &est.gp.to_config(), &mut rng)?;
    let train_cfg = config.train.to_train_config(derive_seed(seed, STREAM_TRAIN))?;
    train_sdn(
        &mut model,
        &x_train.view(),
        &y_train,
        &train_cfg,
        &SdnLossWeights::equal(est.n_internal),
    )?;

    let ens_spec = map.ensemble_train.clone().unwrap_or_else(|| config.train.clone());
    let ens_cfg = ens_spec.to_train_config(0)?;
    let builder = plain_mlp_builder(2, est.hidden.clone(), k);
    let ens = train_ensemble(
        &builder,
        map.ensemble_size,
        &x_train.view(),
        &y_train,
        &ens_cfg,
        derive_seed(seed, STREAM_ENSEMBLE),
    )?;

    let half = map.margin_scale * ds.train_radius();
    let grid = gen_ood_grid(&[(-half, half), (-half, half)], map.resolution)?;
    let (_, ens_dis) = ensemble_scores(&ens, &grid.view())?;
    let sdn_dis = exit_disagreement(&model, &grid.view())?;

    let files = vec![
        "map_ensemble.csv".to_string(),
        "map_sdn.csv".to_string(),
        "map_dataset.csv".to_string(),
    ];
    write_point_csv(
        &config.output_dir.join("map_ensemble.csv"),
        &grid,
        ens_dis.as_slice().expect("contiguous"),
    )?;
    write_point_csv(
        &config.output_dir.join("map_sdn.csv"),
        &grid,
        sdn_dis.as_slice().expect("contiguous"),
    )?;
    ds.save_csv(&config.output_dir.join("map_dataset.csv"))?;

    let entries = vec![SeedEntry { seed, ok: true, files: Vec::new(), error: None }];
    assemble_manifest(config, "disagreement-map", start, entries, files)
}

#[cfg(test)]
mod tests {
    use super::super::config::ExperimentConfig;
    use super::*;

    fn small_config(dir: &Path, kind: &str) -> ExperimentConfig {
        let text = format!(
            r#"
            output_dir = "{}"
            seeds = [0, 1]
            [dataset]
            kind = "spiral"
            n_per_class = 60
            noise_std = 0.05
            [estimator]
            kind = "{kind}"
            hidden = [16, 16, 16]
            n_members = 3
            passes = 4
            n_resblocks = 1
            width = 16
            [estimator.gp]
            rff_dim = 64
            [train]
            epochs = 200
            batch_size = 32
            [eval]
            [[eval.ood]]
            name = "far_field"
            kind = "uniform_shell"
            n = 80
            [[eval.ood]]
            name = "ring"
            kind = "ring"
            n = 60
            "#,
            dir.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn run_writes_reports_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), "tulip");
        let manifest = run(&config).unwrap();
        assert!(manifest.all_ok());
        assert_eq!(manifest.seeds.len(), 2);
        assert_eq!(manifest.command, "run");
        // Every declared file exists and parses under its schema.
        for entry in &manifest.seeds {
            for f in &entry.files {
                let p = dir.path().join(f);
                assert!(p.exists(), "missing {}", p.display());
                if f.ends_with(".json") {
                    EvalReport::load_json(&p).unwrap();
                }
            }
        }
        assert!(manifest.files.contains(&"summary.csv".to_string()));
        let report = EvalReport::load_json(&dir.path().join("seed_0/report.json")).unwrap();
        assert!(report.accuracy > 0.7, "accuracy {}", report.accuracy);
        assert_eq!(report.n_id, 36);
        assert_eq!(report.n_ood, 140);
        assert_eq!(report.auroc_by_ood.len(), 2);
        let loaded = RunManifest::load_json(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.config_sha256, manifest.config_sha256);

        // Summary mean/std recomputed from per-seed files match.
        let r1 = EvalReport::load_json(&dir.path().join("seed_1/report.json")).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let acc_line = summary
            .lines()
            .find(|l| l.starts_with("accuracy,"))
            .unwrap();
        let cols: Vec<&str> = acc_line.split(',').collect();
        let mean: f64 = cols[1].parse().unwrap();
        let std: f64 = cols[2].parse().unwrap();
        let expect_mean = (report.accuracy + r1.accuracy) / 2.0;
        let expect_std = ((report.accuracy - expect_mean).powi(2)
            + (r1.accuracy - expect_mean).powi(2))
        .sqrt();
        assert!((mean - expect_mean).abs() < 1e-12);
        assert!((std - expect_std).abs() < 1e-12);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config = small_config(dir_a.path(), "tulip");
        config.seeds = vec![0];
        let copy = ExperimentConfig {
            output_dir: dir_b.path().to_path_buf(),
            ..config.clone()
        };
        run(&config).unwrap();
        run(&copy).unwrap();
        for f in ["seed_0/report.json", "seed_0/report.csv", "summary.csv"] {
            let a = std::fs::read(dir_a.path().join(f)).unwrap();
            let b = std::fs::read(dir_b.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs across reruns");
        }
    }

    #[test]
    fn every_estimator_kind_runs() {
        for kind in [
            "softmax_entropy",
            "energy",
            "ensemble_total",
            "ensemble_disagreement",
            "mc_dropout",
            "sngp",
        ] {
            let dir = tempfile::tempdir().unwrap();
            let mut config = small_config(dir.path(), kind);
            config.seeds = vec![0];
            config.train.epochs = 4;
            let manifest = run(&config).unwrap();
            assert!(manifest.all_ok(), "{kind} failed: {:?}", manifest.seeds);
            let report = EvalReport::load_json(&dir.path().join("seed_0/report.json")).unwrap();
            assert_eq!(report.estimator.to_string(), kind);
        }
    }

    #[test]
    fn failed_seed_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(dir.path(), "softmax_entropy");
        // An adaptive step this size overflows the next forward pass,
        // so the batch loss goes non-finite during training itself.
        config.train.learning_rate = 1e150;
        config.train.optimizer = "adam".into();
        let manifest = run(&config).unwrap();
        assert!(!manifest.all_ok());
        for entry in &manifest.seeds {
            assert!(!entry.ok);
            assert!(entry.error.as_deref().unwrap().contains("diverged"));
        }
        // No summary without any successful seed.
        assert!(manifest.files.is_empty());
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn surface_emits_grids_and_accuracy_table() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
            output_dir = "{}"
            seeds = [0]
            [dataset]
            kind = "gaussian"
            n_per_class = 50
            n_classes = 4
            center_spread = 5.0
            validation_fraction = 0.0
            [estimator]
            kind = "sngp"
            n_resblocks = 1
            width = 12
            [estimator.gp]
            rff_dim = 12
            [train]
            epochs = 6
            [surface]
            severities = [0.0, 0.5, 1.0]
            "#,
            dir.path().display()
        );
        let config = ExperimentConfig::from_toml_str(&text).unwrap();
        let manifest = surface(&config).unwrap();
        assert!(manifest.all_ok(), "{:?}", manifest.seeds);
        for name in [
            "surface_constrained.csv",
            "surface_unconstrained.csv",
            "accuracy_by_severity.csv",
        ] {
            assert!(manifest.files.contains(&name.to_string()));
            assert!(dir.path().join(name).exists());
        }
        // One grid row group per severity; counts sum to eval sizes.
        let grid = std::fs::read_to_string(dir.path().join("surface_constrained.csv")).unwrap();
        let severities: std::collections::BTreeSet<&str> = grid
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(severities.len(), 3);
        let acc = std::fs::read_to_string(dir.path().join("accuracy_by_severity.csv")).unwrap();
        let mut total_by_sev: BTreeMap<String, usize> = BTreeMap::new();
        for line in acc.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[0] == "constrained" {
                *total_by_sev.entry(cols[1].to_string()).or_default() +=
                    cols[4].parse::<usize>().unwrap();
            }
        }
        for line in grid.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let sev = cols[0].to_string();
            *total_by_sev.get_mut(&sev).unwrap() -= cols[4].parse::<usize>().unwrap();
        }
        for (sev, leftover) in total_by_sev {
            assert_eq!(leftover, 0, "severity {sev} counts do not partition the test set");
        }
    }

    #[test]
    fn surface_requires_its_section() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), "sngp");
        let err = surface(&config).unwrap_err();
        assert!(err.to_string().contains("surface"), "{err}");
    }

    #[test]
    fn map_emits_lattice_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
            output_dir = "{}"
            seeds = [7]
            [dataset]
            kind = "spiral"
            n_per_class = 40
            [estimator]
            kind = "tulip"
            hidden = [12, 12, 12]
            [estimator.gp]
            rff_dim = 12
            [train]
            epochs = 5
            [map]
            resolution = 11
            ensemble_size = 3
            [map.ensemble_train]
            optimizer = "sgd"
            learning_rate = 0.008
            epochs = 5
            "#,
            dir.path().display()
        );
        let config = ExperimentConfig::from_toml_str(&text).unwrap();
        let manifest = disagreement_map(&config).unwrap();
        assert_eq!(manifest.command, "disagreement-map");
        for name in ["map_ensemble.csv", "map_sdn.csv", "map_dataset.csv"] {
            assert!(manifest.files.contains(&name.to_string()));
        }
        for name in ["map_ensemble.csv", "map_sdn.csv"] {
            let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
            // 11 x 11 lattice plus header.
            assert_eq!(text.lines().count(), 122, "{name}");
            assert!(text.starts_with("x0,x1,disagreement\n"));
            for line in text.lines().skip(1) {
                let v: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
                assert!(v >= -1e-12, "negative disagreement {v}");
            }
        }
    }

    #[test]
    fn map_rejects_higher_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
            output_dir = "{}"
            seeds = [0]
            [dataset]
            kind = "gaussian"
            dim = 3
            n_per_class = 30
            n_classes = 3
            [estimator]
            kind = "tulip"
            hidden = [8, 8, 8]
            [train]
            epochs = 2
            "#,
            dir.path().display()
        );
        let config = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = disagreement_map(&config).unwrap_err();
        assert!(matches!(err, Error::UnsupportedConfiguration(_)), "{err}");
    }

    #[test]
    fn dataset_pipeline_scrubs_validation_labels() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), "tulip");
        let ds = build_dataset(&config, 0, None).unwrap();
        let path = dir.path().join("ds.csv");
        ds.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut n_validation = 0;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[3] == "validation" {
                n_validation += 1;
                assert_eq!(cols[2], "-1", "validation label leaked: {line}");
            }
        }
        assert!(n_validation > 0);
    }
}


