//! NaN-aware server aggregation: masked values drop out per coordinate,
//! all-NaN coordinates fall back to the previous central value, and the
//! median resists outlier submissions.
//!
//! Run with: cargo run --release --example nan_aware_aggregation

use fedleak::aggregate::{aggregate, contributor_counts, AggregationKind, AggregationSpec};
use fedleak::nn::{init_params, ModelConfig};
use fedleak::obfuscate::{mask, noise};

fn main() -> fedleak::Result<()> {
    let config = ModelConfig::default_cnn((1, 28, 28), 10, 1);
    let central = init_params(&config)?;

    // ten clients: nine masked at 40%, one noisy outlier
    let mut submissions = Vec::new();
    for client in 0..9u64 {
        submissions.push(mask(&central, 0.4, 100 + client)?);
    }
    submissions.push(noise(&central, 5.0, 999)?);

    let counts = contributor_counts(&submissions)?;
    let mean_count = counts.iter().map(|&c| c as f64).sum::<f64>() / counts.len() as f64;
    let orphaned = counts.iter().filter(|&&c| c == 0).count();
    println!(
        "contributors per coordinate: mean {mean_count:.2} of {}, all-NaN coordinates: {orphaned}",
        submissions.len()
    );

    for kind in [AggregationKind::Mean, AggregationKind::Median] {
        let out = aggregate(
            &submissions,
            &AggregationSpec {
                kind,
                fallback: &central,
            },
        )?;
        assert!(out.is_dense());
        let drift: f64 = out
            .flatten()
            .iter()
            .zip(central.flatten().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / out.total_count() as f64;
        println!(
            "{:<6} aggregation: dense output, mean |drift| from central = {drift:.4}",
            kind.name()
        );
    }
    println!("(the median shrugs off the noisy client; the mean absorbs it)");
    Ok(())
}
