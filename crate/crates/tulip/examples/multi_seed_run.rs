//! Full harness pass without the CLI: run the configured estimator
//! over several seeds, then read the manifest and the aggregated
//! summary back from disk. Identical configs always reproduce the
//! same report bytes.

use tulip::experiment::{run, ExperimentConfig};

fn main() -> tulip::Result<()> {
    let toml = r#"
        output_dir = "target/example_out/run"
        seeds = [0, 1]

        [dataset]
        kind = "spiral"
        n_per_class = 100

        [estimator]
        kind = "tulip"
        hidden = [32, 32, 32]
        n_internal = 2

        [estimator.gp]
        rff_dim = 64

        [train]
        epochs = 200
        batch_size = 64

        [[eval.ood]]
        name = "far_field"
        kind = "uniform_shell"
        n = 300

        [[eval.ood]]
        name = "ring"
        kind = "ring"
        n = 200
    "#;
    let config = ExperimentConfig::from_toml_str(toml)?;
    config.validate()?;

    let manifest = run(&config)?;
    println!("config {}", &manifest.config_sha256[..12]);
    for entry in &manifest.seeds {
        println!("seed {}: ok = {}, files = {:?}", entry.seed, entry.ok, entry.files);
    }

    let summary = std::fs::read_to_string(config.output_dir.join("summary.csv"))?;
    println!("\n{}", summary.trim_end());
    Ok(())
}
