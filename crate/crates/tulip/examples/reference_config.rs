//! Prints a complete experiment configuration with every default
//! spelled out. Redirect to a file to start a new experiment:
//!
//! ```text
//! cargo run --example reference_config > my_experiment.toml
//! ```

fn main() {
    print!("{}", tulip::experiment::reference_toml());
}
