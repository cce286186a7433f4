//! Drive the threshold-sweep harness from the library API: a small grid,
//! CSV + summary emission, and exact replay.
//!
//! Run with: cargo run --release --example threshold_harness

use fedleak::attack::AttackConfig;
use fedleak::harness::{run_threshold_sweep, DatasetKind, DatasetSpec, ExperimentConfig, ModelArch};
use fedleak::obfuscate::ObfuscationMethod;

fn main() -> fedleak::Result<()> {
    let cfg = ExperimentConfig {
        datasets: vec![DatasetSpec {
            kind: DatasetKind::Digits,
            train: 500,
            test: 100,
            classes: 10,
            shape: (1, 28, 28),
            seed: 7,
        }],
        arch: ModelArch::Cnn,
        model_seed: 11,
        attack: AttackConfig {
            max_iterations: 800,
            ..AttackConfig::default()
        },
        grid: vec![
            (ObfuscationMethod::None, vec![0.0]),
            (ObfuscationMethod::Mask, vec![0.4]),
            (ObfuscationMethod::Clip, vec![0.995]),
        ],
        seeds: vec![1, 2, 3],
        out_dir: std::env::temp_dir().join("fedleak_threshold_example"),
        ..ExperimentConfig::default()
    };

    let outcome = run_threshold_sweep(&cfg)?;
    println!("{}", outcome.summary);
    println!(
        "{} cells ({} failed); CSV at {}",
        outcome.cells,
        outcome.failures,
        outcome.csv_path.display()
    );

    // identical config, identical bytes
    let again = run_threshold_sweep(&cfg)?;
    let a = std::fs::read(&outcome.csv_path)?;
    let b = std::fs::read(&again.csv_path)?;
    println!("replay is byte-identical: {}", a == b);
    Ok(())
}
