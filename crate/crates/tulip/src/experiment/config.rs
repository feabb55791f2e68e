//! Experiment configuration: a single TOML file with nested tables,
//! every field defaulted, validated with field-path error messages
//! before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::combiner::SwitchPolarity;
use crate::data::ImbalanceSpec;
use crate::error::{Error, Result};
use crate::gp::GpConfig;
use crate::metrics::EstimatorKind;
use crate::nn::{OptimizerKind, TrainConfig};
use crate::sdn::SwitchScope;

fn config_err(field: &str, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {message}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Spiral,
    Gaussian,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodKind {
    /// Uniform box samples with the inner ball removed.
    UniformShell,
    /// Thin annulus at a multiple of the training radius (2-D only).
    Ring,
    /// Regular lattice spanning a multiple of the training radius.
    Grid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// One of `spiral`, `gaussian`, `csv`.
    pub kind: String,
    #[serde(default = "d_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "d_n_classes")]
    pub n_classes: usize,
    /// Spiral winding (full turns per arm).
    #[serde(default = "d_turns")]
    pub turns: f64,
    /// Spiral per-coordinate Gaussian jitter.
    #[serde(default = "d_noise_std")]
    pub noise_std: f64,
    /// Gaussian-classes input dimension.
    #[serde(default = "d_dim")]
    pub dim: usize,
    /// Gaussian-classes center box half-width.
    #[serde(default = "d_center_spread")]
    pub center_spread: f64,
    /// Gaussian-classes within-cluster standard deviation.
    #[serde(default = "d_cluster_std")]
    pub cluster_std: f64,
    /// CSV source file (kind = "csv").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "d_label_column")]
    pub label_column: String,
    /// Stratified fraction moved to the test split.
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    /// Fraction of the remaining train rows held out (labels removed).
    #[serde(default = "d_validation_fraction")]
    pub validation_fraction: f64,
    /// Optional class-subset reduction applied before the validation
    /// split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<ImbalanceSpec>,
}

fn d_n_per_class() -> usize {
    500
}
fn d_n_classes() -> usize {
    3
}
fn d_turns() -> f64 {
    1.0
}
fn d_noise_std() -> f64 {
    0.05
}
fn d_dim() -> usize {
    2
}
fn d_center_spread() -> f64 {
    6.0
}
fn d_cluster_std() -> f64 {
    1.0
}
fn d_label_column() -> String {
    "label".into()
}
fn d_test_fraction() -> f64 {
    0.2
}
fn d_validation_fraction() -> f64 {
    0.1
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: "spiral".into(),
            n_per_class: d_n_per_class(),
            n_classes: d_n_classes(),
            turns: d_turns(),
            noise_std: d_noise_std(),
            dim: d_dim(),
            center_spread: d_center_spread(),
            cluster_std: d_cluster_std(),
            path: None,
            label_column: d_label_column(),
            test_fraction: d_test_fraction(),
            validation_fraction: d_validation_fraction(),
            imbalance: None,
        }
    }
}

impl DatasetSpec {
    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        match self.kind.as_str() {
            "spiral" => Ok(DatasetKind::Spiral),
            "gaussian" => Ok(DatasetKind::Gaussian),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(config_err(
                "dataset.kind",
                format!("unknown dataset `{other}`, expected one of spiral, gaussian, csv"),
            )),
        }
    }

    /// Input dimension when it is knowable without reading files.
    pub fn known_dim(&self) -> Option<usize> {
        match self.dataset_kind() {
            Ok(DatasetKind::Spiral) => Some(2),
            Ok(DatasetKind::Gaussian) => Some(self.dim),
            _ => None,
        }
    }

    fn validate(&self, estimator: &EstimatorSpec) -> Result<()> {
        let kind = self.dataset_kind()?;
        match kind {
            DatasetKind::Spiral => {
                if self.n_classes < 2 {
                    return Err(config_err("dataset.n_classes", "need at least two classes"));
                }
                if self.n_per_class == 0 {
                    return Err(config_err("dataset.n_per_class", "must be positive"));
                }
                if !(self.turns > 0.0 && self.turns.is_finite()) {
                    return Err(config_err("dataset.turns", "must be positive and finite"));
                }
                if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
                    return Err(config_err("dataset.noise_std", "must be nonnegative"));
                }
            }
            DatasetKind::Gaussian => {
                if self.n_classes < 2 {
                    return Err(config_err("dataset.n_classes", "need at least two classes"));
                }
                if self.n_per_class == 0 {
                    return Err(config_err("dataset.n_per_class", "must be positive"));
                }
                if self.dim == 0 {
                    return Err(config_err("dataset.dim", "must be positive"));
                }
                if !(self.center_spread > 0.0 && self.center_spread.is_finite()) {
                    return Err(config_err("dataset.center_spread", "must be positive"));
                }
                if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
                    return Err(config_err("dataset.cluster_std", "must be nonnegative"));
                }
            }
            DatasetKind::Csv => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| config_err("dataset.path", "required when kind = \"csv\""))?;
                if !path.exists() {
                    return Err(config_err(
                        "dataset.path",
                        format!("file not found: {}", path.display()),
                    ));
                }
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(config_err(
                "dataset.test_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(config_err(
                "dataset.validation_fraction",
                "must lie in [0, 1)",
            ));
        }
        if estimator.estimator_kind()? == EstimatorKind::Tulip && self.validation_fraction == 0.0 {
            return Err(config_err(
                "dataset.validation_fraction",
                "the combination head is fitted on held-out rows; must be positive for tulip",
            ));
        }
        if let Some(imb) = &self.imbalance {
            imb.validate()
                .map_err(|e| config_err("dataset.imbalance", e))?;
            if kind != DatasetKind::Csv {
                for &c in imb.class_subset_a.iter().chain(&imb.class_subset_b) {
                    if c >= self.n_classes {
                        return Err(config_err(
                            "dataset.imbalance",
                            format!("class {c} outside 0..{}", self.n_classes),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSpec {
    #[serde(default = "d_rff_dim")]
    pub rff_dim: usize,
    #[serde(default = "d_length_scale")]
    pub length_scale: f64,
    #[serde(default = "d_ridge")]
    pub ridge: f64,
    #[serde(default = "d_mean_field_lambda")]
    pub mean_field_lambda: f64,
}

fn d_rff_dim() -> usize {
    128
}
fn d_length_scale() -> f64 {
    2.0
}
fn d_ridge() -> f64 {
    1.0
}
fn d_mean_field_lambda() -> f64 {
    std::f64::consts::PI / 8.0
}

impl Default for GpSpec {
    fn default() -> Self {
        GpSpec {
            rff_dim: d_rff_dim(),
            length_scale: d_length_scale(),
            ridge: d_ridge(),
            mean_field_lambda: d_mean_field_lambda(),
        }
    }
}

impl GpSpec {
    pub fn to_config(&self) -> GpConfig {
        GpConfig {
            rff_dim: self.rff_dim,
            length_scale: self.length_scale,
            ridge: self.ridge,
            mean_field_lambda: self.mean_field_lambda,
        }
    }

    fn validate(&self) -> Result<()> {
        self.to_config()
            .validate()
            .map_err(|e| config_err("estimator.gp", e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinerSpec {
    /// Switch-count threshold; omitted means choose it from the
    /// validation mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_switches: Option<usize>,
    #[serde(default)]
    pub polarity: SwitchPolarity,
    #[serde(default)]
    pub scope: SwitchScope,
    #[serde(default = "d_l2")]
    pub l2: f64,
}

fn d_l2() -> f64 {
    1e-3
}

impl Default for CombinerSpec {
    fn default() -> Self {
        CombinerSpec {
            n_switches: None,
            polarity: SwitchPolarity::default(),
            scope: SwitchScope::default(),
            l2: d_l2(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    /// One of the estimator tags (`tulip`, `softmax_entropy`, `energy`,
    /// `ensemble_total`, `ensemble_disagreement`, `mc_dropout`,
    /// `sngp`).
    pub kind: String,
    /// Hidden widths of the MLP backbone (plain, ensemble, dropout,
    /// tulip).
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    /// Number of internal classifiers (tulip).
    #[serde(default = "d_n_internal")]
    pub n_internal: usize,
    /// Ensemble size.
    #[serde(default = "d_n_members")]
    pub n_members: usize,
    /// Dropout probability (mc_dropout).
    #[serde(default = "d_dropout_rate")]
    pub dropout_rate: f64,
    /// Stochastic forward passes (mc_dropout).
    #[serde(default = "d_passes")]
    pub passes: usize,
    /// Spectral-norm budget; `inf` disables the constraint (sngp,
    /// surface runs).
    #[serde(default = "d_sn_coefficient")]
    pub sn_coefficient: f64,
    /// Residual blocks in the sngp backbone.
    #[serde(default = "d_n_resblocks")]
    pub n_resblocks: usize,
    /// Width of the sngp backbone.
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default)]
    pub gp: GpSpec,
    #[serde(default)]
    pub combiner: CombinerSpec,
}

fn d_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}
fn d_n_internal() -> usize {
    2
}
fn d_n_members() -> usize {
    10
}
fn d_dropout_rate() -> f64 {
    0.01
}
fn d_passes() -> usize {
    10
}
fn d_sn_coefficient() -> f64 {
    3.0
}
fn d_n_resblocks() -> usize {
    2
}
fn d_width() -> usize {
    128
}

impl EstimatorSpec {
    pub fn estimator_kind(&self) -> Result<EstimatorKind> {
        self.kind
            .parse::<EstimatorKind>()
            .map_err(|e| config_err("estimator.kind", e))
    }

    fn validate(&self) -> Result<()> {
        let kind = self.estimator_kind()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(config_err(
                "estimator.hidden",
                "need at least one positive hidden width",
            ));
        }
        self.gp.validate()?;
        match kind {
            EstimatorKind::Tulip => {
                if self.n_internal == 0 {
                    return Err(config_err("estimator.n_internal", "must be positive"));
                }
                if self.n_internal >= self.hidden.len() {
                    return Err(config_err(
                        "estimator.n_internal",
                        format!(
                            "cannot place {} internal classifiers in a depth-{} backbone",
                            self.n_internal,
                            self.hidden.len()
                        ),
                    ));
                }
                if self.combiner.scope == SwitchScope::IcsOnly && self.n_internal < 2 {
                    return Err(config_err(
                        "estimator.n_internal",
                        "switch counting over internal classifiers needs at least two; \
                         set combiner.scope = \"include_final\" or add classifiers",
                    ));
                }
                let max_threshold = match self.combiner.scope {
                    SwitchScope::IcsOnly => self.n_internal,
                    SwitchScope::IncludeFinal => self.n_internal + 1,
                };
                if let Some(ns) = self.combiner.n_switches {
                    if ns < 1 || ns > max_threshold {
                        return Err(config_err(
                            "estimator.combiner.n_switches",
                            format!("must lie in [1, {max_threshold}] for this scope"),
                        ));
                    }
                }
                if !(self.combiner.l2 >= 0.0 && self.combiner.l2.is_finite()) {
                    return Err(config_err("estimator.combiner.l2", "must be nonnegative"));
                }
            }
            EstimatorKind::EnsembleTotal | EstimatorKind::EnsembleDisagreement => {
                if self.n_members < 2 {
                    return Err(config_err("estimator.n_members", "need at least two members"));
                }
            }
            EstimatorKind::McDropout => {
                if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
                    return Err(config_err(
                        "estimator.dropout_rate",
                        "must lie strictly between 0 and 1",
                    ));
                }
                if self.passes < 2 {
                    return Err(config_err("estimator.passes", "need at least two passes"));
                }
            }
            EstimatorKind::Sngp => {
                if self.n_resblocks == 0 {
                    return Err(config_err(
                        "estimator.n_resblocks",
                        "need at least one residual block",
                    ));
                }
                if self.width == 0 {
                    return Err(config_err("estimator.width", "must be positive"));
                }
                if self.sn_coefficient.is_nan() || self.sn_coefficient <= 0.0 {
                    return Err(config_err(
                        "estimator.sn_coefficient",
                        "must be positive (inf disables the constraint)",
                    ));
                }
            }
            EstimatorKind::SoftmaxEntropy | EstimatorKind::Energy => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    /// `adam` or `sgd`.
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    /// `[epoch, factor]` pairs; the rate is multiplied by the factor at
    /// the start of the 1-based epoch.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
}

fn d_optimizer() -> String {
    "adam".into()
}
fn d_learning_rate() -> f64 {
    1e-3
}
fn d_epochs() -> usize {
    400
}
fn d_batch_size() -> usize {
    64
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            optimizer: d_optimizer(),
            learning_rate: d_learning_rate(),
            epochs: d_epochs(),
            batch_size: d_batch_size(),
            lr_schedule: Vec::new(),
        }
    }
}

impl TrainSpec {
    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer `{other}`, expected adam or sgd"
            ))),
        }
    }

    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            optimizer: self.optimizer_kind()?,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_schedule: self.lr_schedule.clone(),
            seed,
        })
    }

    fn validate(&self, field: &str) -> Result<()> {
        self.optimizer_kind()
            .map_err(|e| config_err(&format!("{field}.optimizer"), e))?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err(
                &format!("{field}.learning_rate"),
                "must be positive",
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err(&format!("{field}.batch_size"), "must be positive"));
        }
        for &(epoch, factor) in &self.lr_schedule {
            if epoch == 0 {
                return Err(config_err(
                    &format!("{field}.lr_schedule"),
                    "epochs are 1-based; 0 never fires",
                ));
            }
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(config_err(
                    &format!("{field}.lr_schedule"),
                    format!("factor at epoch {epoch} must be positive"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSpec {
    /// Key used in reports; must be unique across sets.
    pub name: String,
    /// One of `uniform_shell`, `ring`, `grid`.
    pub kind: String,
    /// Sample count (uniform_shell, ring).
    #[serde(default = "d_ood_n")]
    pub n: usize,
    /// Shell inner radius as a multiple of the training radius.
    #[serde(default = "d_inner_scale")]
    pub inner_scale: f64,
    /// Shell sampling box half-width as a multiple of the training
    /// radius.
    #[serde(default = "d_outer_scale")]
    pub outer_scale: f64,
    /// Ring radius as a multiple of the training radius.
    #[serde(default = "d_radius_scale")]
    pub radius_scale: f64,
    /// Ring radial thickness in data units.
    #[serde(default = "d_ring_width")]
    pub width: f64,
    /// Grid half-width as a multiple of the training radius.
    #[serde(default = "d_margin_scale")]
    pub margin_scale: f64,
    /// Grid points per axis.
    #[serde(default = "d_ood_resolution")]
    pub resolution: usize,
}

fn d_ood_n() -> usize {
    500
}
fn d_inner_scale() -> f64 {
    1.5
}
fn d_outer_scale() -> f64 {
    3.0
}
fn d_radius_scale() -> f64 {
    2.0
}
fn d_ring_width() -> f64 {
    0.25
}
fn d_margin_scale() -> f64 {
    2.0
}
fn d_ood_resolution() -> usize {
    21
}

impl OodSpec {
    pub fn ood_kind(&self) -> Result<OodKind> {
        match self.kind.as_str() {
            "uniform_shell" => Ok(OodKind::UniformShell),
            "ring" => Ok(OodKind::Ring),
            "grid" => Ok(OodKind::Grid),
            other => Err(Error::Config(format!(
                "unknown set `{other}`, expected one of uniform_shell, ring, grid"
            ))),
        }
    }

    fn validate(&self, field: &str, input_dim: Option<usize>) -> Result<()> {
        if self.name.is_empty() {
            return Err(config_err(&format!("{field}.name"), "must not be empty"));
        }
        let kind = self
            .ood_kind()
            .map_err(|e| config_err(&format!("{field}.kind"), e))?;
        match kind {
            OodKind::UniformShell => {
                if self.n == 0 {
                    return Err(config_err(&format!("{field}.n"), "must be positive"));
                }
                if !(self.inner_scale >= 0.0 && self.inner_scale < self.outer_scale) {
                    return Err(config_err(
                        &format!("{field}.inner_scale"),
                        "must be nonnegative and below outer_scale",
                    ));
                }
                if !self.outer_scale.is_finite() {
                    return Err(config_err(&format!("{field}.outer_scale"), "must be finite"));
                }
            }
            OodKind::Ring => {
                if self.n == 0 {
                    return Err(config_err(&format!("{field}.n"), "must be positive"));
                }
                if !(self.radius_scale > 0.0 && self.radius_scale.is_finite()) {
                    return Err(config_err(&format!("{field}.radius_scale"), "must be positive"));
                }
                if !(self.width >= 0.0 && self.width.is_finite()) {
                    return Err(config_err(&format!("{field}.width"), "must be nonnegative"));
                }
                if let Some(d) = input_dim {
                    if d != 2 {
                        return Err(config_err(
                            &format!("{field}.kind"),
                            format!("ring sets need 2-D inputs, dataset has {d}"),
                        ));
                    }
                }
            }
            OodKind::Grid => {
                if self.resolution < 2 {
                    return Err(config_err(
                        &format!("{field}.resolution"),
                        "need at least two points per axis",
                    ));
                }
                if !(self.margin_scale > 0.0 && self.margin_scale.is_finite()) {
                    return Err(config_err(&format!("{field}.margin_scale"), "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "d_ece_bins")]
    pub ece_bins: usize,
    #[serde(default = "d_surface_bins")]
    pub surface_bins: usize,
    #[serde(default = "d_ood_sets")]
    pub ood: Vec<OodSpec>,
}

fn d_ece_bins() -> usize {
    15
}
fn d_surface_bins() -> usize {
    10
}
fn d_ood_sets() -> Vec<OodSpec> {
    vec![OodSpec {
        name: "far_field".into(),
        kind: "uniform_shell".into(),
        n: d_ood_n(),
        inner_scale: d_inner_scale(),
        outer_scale: d_outer_scale(),
        radius_scale: d_radius_scale(),
        width: d_ring_width(),
        margin_scale: d_margin_scale(),
        resolution: d_ood_resolution(),
    }]
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            ece_bins: d_ece_bins(),
            surface_bins: d_surface_bins(),
            ood: d_ood_sets(),
        }
    }
}

impl EvalSpec {
    fn validate(&self, input_dim: Option<usize>) -> Result<()> {
        if self.ece_bins == 0 {
            return Err(config_err("eval.ece_bins", "must be positive"));
        }
        if self.surface_bins == 0 {
            return Err(config_err("eval.surface_bins", "must be positive"));
        }
        if self.ood.is_empty() {
            return Err(config_err(
                "eval.ood",
                "need at least one out-of-distribution set",
            ));
        }
        let mut names = std::collections::HashSet::new();
        for (i, set) in self.ood.iter().enumerate() {
            let field = format!("eval.ood[{i}]");
            set.validate(&field, input_dim)?;
            if !names.insert(set.name.clone()) {
                return Err(config_err(
                    &format!("{field}.name"),
                    format!("duplicate set name `{}`", set.name),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    /// Imbalance severities to sweep; 0 is the unmodified dataset.
    #[serde(default = "d_severities")]
    pub severities: Vec<f64>,
    /// Train-split removal fraction on subset A at full severity.
    #[serde(default = "d_train_reduction")]
    pub train_reduction: f64,
    /// Test-split removal fraction on subset B at full severity.
    #[serde(default = "d_test_reduction")]
    pub test_reduction: f64,
}

fn d_severities() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}
fn d_train_reduction() -> f64 {
    0.8
}
fn d_test_reduction() -> f64 {
    0.9
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        SurfaceSpec {
            severities: d_severities(),
            train_reduction: d_train_reduction(),
            test_reduction: d_test_reduction(),
        }
    }
}

impl SurfaceSpec {
    fn validate(&self) -> Result<()> {
        if self.severities.is_empty() {
            return Err(config_err("surface.severities", "need at least one severity"));
        }
        for &s in &self.severities {
            if !(0.0..=1.0).contains(&s) {
                return Err(config_err(
                    "surface.severities",
                    format!("severity {s} outside [0, 1]"),
                ));
            }
        }
        for (field, v) in [
            ("surface.train_reduction", self.train_reduction),
            ("surface.test_reduction", self.test_reduction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    /// Lattice half-width as a multiple of the training radius.
    #[serde(default = "d_margin_scale")]
    pub margin_scale: f64,
    /// Lattice points per axis.
    #[serde(default = "d_map_resolution")]
    pub resolution: usize,
    #[serde(default = "d_ensemble_size")]
    pub ensemble_size: usize,
    /// Optional separate training recipe for the ensemble members;
    /// falls back to [train].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_train: Option<TrainSpec>,
}

fn d_map_resolution() -> usize {
    101
}
fn d_ensemble_size() -> usize {
    10
}

impl Default for MapSpec {
    fn default() -> Self {
        MapSpec {
            margin_scale: d_margin_scale(),
            resolution: d_map_resolution(),
            ensemble_size: d_ensemble_size(),
            ensemble_train: None,
        }
    }
}

impl MapSpec {
    fn validate(&self) -> Result<()> {
        if !(self.margin_scale > 0.0 && self.margin_scale.is_finite()) {
            return Err(config_err("map.margin_scale", "must be positive"));
        }
        if self.resolution < 2 {
            return Err(config_err("map.resolution", "need at least two points per axis"));
        }
        if self.ensemble_size < 2 {
            return Err(config_err("map.ensemble_size", "need at least two members"));
        }
        if let Some(t) = &self.ensemble_train {
            t.validate("map.ensemble_train")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<SurfaceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical serialization with every default filled in; hashing
    /// this pins the effective configuration, not just the file bytes.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(config_err("output_dir", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "need at least one seed"));
        }
        let mut seen = std::collections::HashSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(config_err("seeds", format!("duplicate seed {s}")));
            }
        }
        self.estimator.validate()?;
        self.dataset.validate(&self.estimator)?;
        self.train.validate("train")?;
        self.eval.validate(self.dataset.known_dim())?;
        if let Some(surface) = &self.surface {
            surface.validate()?;
        }
        if let Some(map) = &self.map {
            map.validate()?;
        }
        Ok(())
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let config = ExperimentConfig::from_toml_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// A complete configuration with every field at its default, as TOML.
/// Serves as the generated reference for the file format.
pub fn reference_toml() -> String {
    let config = ExperimentConfig {
        output_dir: PathBuf::from("runs/example"),
        seeds: vec![0, 1, 2],
        dataset: DatasetSpec::default(),
        estimator: EstimatorSpec {
            kind: "tulip".into(),
            hidden: d_hidden(),
            n_internal: d_n_internal(),
            n_members: d_n_members(),
            dropout_rate: d_dropout_rate(),
            passes: d_passes(),
            sn_coefficient: d_sn_coefficient(),
            n_resblocks: d_n_resblocks(),
            width: d_width(),
            gp: GpSpec::default(),
            combiner: CombinerSpec::default(),
        },
        train: TrainSpec::default(),
        eval: EvalSpec::default(),
        surface: Some(SurfaceSpec::default()),
        map: Some(MapSpec::default()),
    };
    config
        .canonical_toml()
        .expect("reference config always serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        output_dir = "runs/t"
        seeds = [0, 1]
        [dataset]
        kind = "spiral"
        [estimator]
        kind = "tulip"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.n_per_class, 500);
        assert_eq!(cfg.estimator.hidden, vec![128, 128, 128]);
        assert_eq!(cfg.estimator.n_internal, 2);
        assert_eq!(cfg.train.epochs, 400);
        assert_eq!(cfg.eval.ece_bins, 15);
        assert_eq!(cfg.eval.ood.len(), 1);
        assert_eq!(cfg.eval.ood[0].name, "far_field");
        assert!(cfg.surface.is_none());
        assert_eq!(
            cfg.estimator.gp.mean_field_lambda,
            std::f64::consts::PI / 8.0
        );
    }

    #[test]
    fn unknown_estimator_names_the_field() {
        let text = MINIMAL.replace("kind = \"tulip\"", "kind = \"oracle9000\"");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("estimator.kind"), "{msg}");
        assert!(msg.contains("oracle9000"), "{msg}");
        assert!(msg.contains("softmax_entropy"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nfrobnicate = 3\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
        let nested = MINIMAL.replace("[estimator]", "[estimator]\nwarp_factor = 9");
        let err = ExperimentConfig::from_toml_str(&nested).unwrap_err();
        assert!(err.to_string().contains("warp_factor"), "{err}");
    }

    #[test]
    fn field_level_validation_errors_carry_paths() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("seeds"));

        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.seeds = vec![3, 3];
        assert!(cfg.validate().unwrap_err().to_string().contains("duplicate seed"));

        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.dataset.test_fraction = 1.2;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("dataset.test_fraction"));

        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.dataset.validation_fraction = 0.0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("dataset.validation_fraction"));

        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.estimator.n_internal = 5;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("estimator.n_internal"));

        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.estimator.combiner.n_switches = Some(4);
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("estimator.combiner.n_switches"));

        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.eval.ood.push(cfg.eval.ood[0].clone());
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("duplicate set name"));
    }

    #[test]
    fn missing_csv_file_fails_validation() {
        let text = MINIMAL
            .replace("kind = \"spiral\"", "kind = \"csv\"\npath = \"no/such/file.csv\"");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("dataset.path"), "{msg}");
        assert!(msg.contains("no/such/file.csv"), "{msg}");
    }

    #[test]
    fn ring_set_requires_two_dimensions() {
        let text = MINIMAL.replace(
            "kind = \"spiral\"",
            "kind = \"gaussian\"\ndim = 5\nn_classes = 4",
        ) + "\n[[eval.ood]]\nname = \"ring\"\nkind = \"ring\"\n";
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("2-D"), "{msg}");
    }

    #[test]
    fn reference_config_round_trips_and_validates() {
        let text = reference_toml();
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        cfg.validate().unwrap();
        // Every section of the format appears in the reference.
        for key in [
            "output_dir",
            "[dataset]",
            "[estimator]",
            "[estimator.gp]",
            "[estimator.combiner]",
            "[train]",
            "[eval]",
            "[[eval.ood]]",
            "[surface]",
            "[map]",
        ] {
            assert!(text.contains(key), "reference lacks {key}:\n{text}");
        }
    }

    #[test]
    fn canonical_toml_is_stable() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let a = cfg.canonical_toml().unwrap();
        let b = ExperimentConfig::from_toml_str(&a).unwrap().canonical_toml().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infinite_sn_coefficient_parses() {
        let text = MINIMAL.replace(
            "kind = \"tulip\"",
            "kind = \"sngp\"\nsn_coefficient = inf",
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        cfg.validate().unwrap();
        assert!(cfg.estimator.sn_coefficient.is_infinite());
    }
}
