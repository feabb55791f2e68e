//! Drives the experiment harness directly: a class-imbalance severity
//! sweep comparing the norm-constrained residual GP model against its
//! unconstrained twin. At severity 0 the dataset is untouched; rising
//! severity strips one class subset from training and another from
//! test, shifting how much the norm constraint costs or buys.

use tulip::experiment::{surface, ExperimentConfig};

fn main() -> tulip::Result<()> {
    let toml = r#"
        output_dir = "target/example_out/surface"
        seeds = [0]

        [dataset]
        kind = "gaussian"
        n_classes = 6
        n_per_class = 120
        dim = 2
        validation_fraction = 0.0

        [estimator]
        kind = "sngp"
        n_resblocks = 1
        width = 32
        sn_coefficient = 3.0

        [estimator.gp]
        rff_dim = 32

        [train]
        epochs = 60
        batch_size = 64

        [surface]
        severities = [0.0, 0.5, 1.0]
    "#;
    let config = ExperimentConfig::from_toml_str(toml)?;
    config.validate()?;
    let manifest = surface(&config)?;
    println!("artifacts ({}):", config.output_dir.display());
    for file in &manifest.files {
        println!("  {file}");
    }

    let table = std::fs::read_to_string(config.output_dir.join("accuracy_by_severity.csv"))?;
    println!("\n{}", table.trim_end());
    Ok(())
}
