//! Small federated convergence comparison: unobfuscated training versus
//! masking and pruning, on IID shards with mean aggregation.
//!
//! Run with: cargo run --release --example fl_convergence

use fedleak::data::synth_dataset;
use fedleak::nn::ModelConfig;
use fedleak::obfuscate::ObfuscationSpec;
use fedleak::protocol::{run_training, PartitionSpec, RoundConfig};

fn main() -> fedleak::Result<()> {
    let train = synth_dataset(1000, 4, (1, 28, 28), 1)?;
    let test = synth_dataset(300, 4, (1, 28, 28), 2)?;
    let model = ModelConfig::default_cnn((1, 28, 28), 4, 9);

    let base = RoundConfig {
        rounds: 8,
        epochs: 1,
        clients: 5,
        batch_size: 32,
        seed: 4,
        ..RoundConfig::default()
    };

    for (label, obf) in [
        ("none", ObfuscationSpec::none()),
        ("mask 0.4", ObfuscationSpec::mask(0.4, 0)),
        ("prune 0.95", ObfuscationSpec::prune(0.95)),
    ] {
        let cfg = RoundConfig {
            obfuscation: obf,
            ..base.clone()
        };
        let trace = run_training(&model, &train, &test, &cfg, &PartitionSpec::iid(3))?;
        let curve: Vec<String> = trace
            .records
            .iter()
            .map(|r| format!("{:.2}", r.accuracy))
            .collect();
        println!(
            "{label:>10}: final accuracy {:.3}, per round {:?}",
            trace.final_accuracy(),
            curve
        );
    }
    println!("\n(masking aggregates only the surviving values, so training keeps pace;");
    println!(" pruning zeroes most small parameters and drags convergence)");
    Ok(())
}
