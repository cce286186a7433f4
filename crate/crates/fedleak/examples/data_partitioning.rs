//! IID versus Dirichlet client splits: per-client class histograms at
//! different concentration values.
//!
//! Run with: cargo run --release --example data_partitioning

use fedleak::data::synth_digits;
use fedleak::protocol::{partition, PartitionSpec};

fn show(title: &str, labels: &[usize], shards: &[Vec<usize>]) {
    println!("{title}");
    for (c, shard) in shards.iter().enumerate() {
        let mut hist = [0usize; 10];
        for &i in shard {
            hist[labels[i]] += 1;
        }
        let bars: String = hist
            .iter()
            .map(|&h| {
                let level = (h as f64 / shard.len().max(1) as f64 * 10.0).round() as usize;
                char::from_digit(level.min(9) as u32, 10).unwrap()
            })
            .collect();
        println!("  client {c}: {:>4} samples, class profile [{bars}]", shard.len());
    }
}

fn main() -> fedleak::Result<()> {
    let data = synth_digits(2000, 3)?;
    let clients = 10;

    let iid = partition(&data.labels, data.classes, &PartitionSpec::iid(1), clients)?;
    show("IID (stratified):", &data.labels, &iid);

    for beta in [10.0, 0.5, 0.1] {
        let shards = partition(
            &data.labels,
            data.classes,
            &PartitionSpec::dirichlet(beta, 1),
            clients,
        )?;
        show(&format!("\nDirichlet beta = {beta}:"), &data.labels, &shards);
    }
    println!("\n(profile digits are tenths of the shard per class; smaller beta = more skew)");
    Ok(())
}
