//! Single-pass uncertainty estimation from layered internal
//! classifiers, with Gaussian-process output heads, reference baselines,
//! and a reproducible evaluation harness.
//!
//! The crate is organized around one idea: a feed-forward backbone
//! exposes intermediate activations at tap points, lightweight
//! classifier heads read those taps, and the spread of opinions across
//! depth is distilled into a single uncertainty score in one forward
//! pass. Modules:
//!
//! - [`data`]: synthetic generators (spirals, Gaussian classes, grids),
//!   the class-imbalance protocol, splits, CSV import/export.
//! - [`nn`]: dense/residual/dropout networks, backprop with gradient
//!   injection at taps, spectral normalization, minibatch training.
//! - [`gp`]: random-feature Gaussian-process heads with a Laplace
//!   precision pass, mean-field adjusted logits, and evidential scores.
//! - [`sdn`]: the multi-exit model (backbone + internal classifiers +
//!   final head), its joint training loss, and prediction switches.
//! - [`combiner`]: the switch-supervised combination head fitted on
//!   unlabeled validation features.
//! - [`baselines`]: softmax entropy, energy scores, deep ensembles,
//!   MC-dropout, and a spectral-normalized GP baseline.
//! - [`metrics`]: AUROC, calibration error, accuracy, and the
//!   severity-by-uncertainty surface grids.
//! - [`preservation`]: layer-distance diagnostics, distortion profiles,
//!   nonnegative distance-preservation fits, collapse resistance.
//! - [`experiment`]: config-driven runs, surfaces, disagreement maps,
//!   and report/manifest artifacts (the CLI is a thin shell over this).

pub mod baselines;
pub mod combiner;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod preservation;
pub mod sdn;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed. Splitmix64 on
/// the pair, so distinct purposes get decorrelated generators.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
