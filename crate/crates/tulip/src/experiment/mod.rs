//! Config-driven experiment runner: loads a TOML description of a
//! dataset, an estimator, and an evaluation protocol, then executes it
//! across seeds and writes machine-readable reports.

mod config;
mod runner;

pub use config::{
    load_config, reference_toml, CombinerSpec, DatasetKind, DatasetSpec, EstimatorSpec, EvalSpec,
    ExperimentConfig, GpSpec, MapSpec, OodKind, OodSpec, SurfaceSpec, TrainSpec,
};
pub use runner::{disagreement_map, run, surface, RunManifest, SeedEntry};
