use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedleak::aggregate::AggregationKind;
use fedleak::harness::{
    run_attack_demo, run_convergence, run_threshold_sweep, DatasetKind, DatasetSpec,
    ExperimentConfig, ExperimentOutcome,
};
use fedleak::obfuscate::ObfuscationMethod;
use fedleak::protocol::PartitionSpec;

/// Desk-scale federated learning with obfuscation defenses and a
/// gradient-inversion attack harness.
#[derive(Parser)]
#[command(name = "fedleak", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack a grid of obfuscated gradients and tabulate leakage scores.
    ThresholdSweep(RunArgs),
    /// Compare federated convergence across obfuscation methods.
    Convergence(RunArgs),
    /// Reconstruct one training image and write pixmap files.
    AttackDemo(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (INI-style; see the `configs/` directory).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides the config file).
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads for sweep cells; 0 uses all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Record real wall-clock times in CSV rows (breaks byte-identical
    /// replay of result files).
    #[arg(long)]
    timings: bool,
}

fn apply_overrides(mut cfg: ExperimentConfig, args: &RunArgs) -> Result<ExperimentConfig, String> {
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds
            .split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| format!("bad seed `{s}`")))
            .collect::<Result<_, _>>()?;
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    if args.timings {
        cfg.timings = true;
    }
    Ok(cfg)
}

fn base_config(args: &RunArgs) -> Result<ExperimentConfig, String> {
    match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.to_string()),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Paper-style grid over both offline datasets; applied only when the user
/// did not supply a config file.
fn default_threshold(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.attack.masked_targets = fedleak::attack::MaskedTargets::ZeroFill;
    cfg.grid = vec![
        (ObfuscationMethod::None, vec![0.0]),
        (ObfuscationMethod::Noise, vec![0.05, 0.25, 0.5]),
        (ObfuscationMethod::Clip, vec![0.999, 0.995, 0.99]),
        (ObfuscationMethod::Prune, vec![0.8, 0.9, 0.95]),
        (ObfuscationMethod::Mask, vec![0.2, 0.3, 0.4]),
    ];
    cfg
}

fn default_convergence(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.grid = vec![
        (ObfuscationMethod::None, vec![0.0]),
        (ObfuscationMethod::Mask, vec![0.4]),
        (ObfuscationMethod::Clip, vec![0.995]),
        (ObfuscationMethod::Prune, vec![0.95]),
        (ObfuscationMethod::Noise, vec![0.5]),
    ];
    cfg.datasets = vec![DatasetSpec {
        kind: DatasetKind::Synth,
        train: 2000,
        test: 1000,
        classes: 4,
        shape: (1, 28, 28),
        seed: 7,
    }];
    cfg.aggregations = vec![AggregationKind::Mean, AggregationKind::Median];
    cfg.partitions = vec![PartitionSpec::iid(5), PartitionSpec::dirichlet(0.5, 5)];
    cfg
}

fn default_demo(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.seeds = vec![1];
    cfg
}

fn finish(name: &str, outcome: fedleak::Result<ExperimentOutcome>) -> ExitCode {
    match outcome {
        Ok(out) => {
            println!("{}", out.summary);
            println!(
                "{name}: {} cells, {} failed; results in {}",
                out.cells,
                out.failures,
                out.csv_path.display()
            );
            if out.failures > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("{name}: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args, shape): (&str, &RunArgs, fn(ExperimentConfig) -> ExperimentConfig) =
        match &cli.command {
            Command::ThresholdSweep(a) => ("threshold-sweep", a, default_threshold),
            Command::Convergence(a) => ("convergence", a, default_convergence),
            Command::AttackDemo(a) => ("attack-demo", a, default_demo),
        };
    let cfg = match base_config(args) {
        Ok(c) => {
            // built-in experiment shapes only apply without a config file
            let c = if args.config.is_none() { shape(c) } else { c };
            match apply_overrides(c, args) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{name}: {e}");
                    return ExitCode::from(1);
                }
            }
        }
        Err(e) => {
            eprintln!("{name}: {e}");
            return ExitCode::from(1);
        }
    };
    match cli.command {
        Command::ThresholdSweep(_) => finish(name, run_threshold_sweep(&cfg)),
        Command::Convergence(_) => finish(name, run_convergence(&cfg)),
        Command::AttackDemo(_) => finish(name, run_attack_demo(&cfg)),
    }
}
