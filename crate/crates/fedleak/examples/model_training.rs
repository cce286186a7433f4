//! Build the default CNN, train it on synthetic data, evaluate, and
//! round-trip the parameter bundle through its binary format.
//!
//! Run with: cargo run --release --example model_training

use fedleak::data::synth_dataset;
use fedleak::nn::{
    evaluate, init_params, train_epochs, ModelConfig, OptimizerSpec, ParameterBundle, TrainOpts,
};

fn main() -> fedleak::Result<()> {
    let train = synth_dataset(800, 4, (1, 28, 28), 1)?;
    let test = synth_dataset(200, 4, (1, 28, 28), 2)?;

    let config = ModelConfig::default_cnn((1, 28, 28), 4, 42);
    let params = init_params(&config)?;
    println!(
        "model: {} parameters in {} entries, {:.2}% exempt from masking",
        params.total_count(),
        params.entries().len(),
        params.mask_exempt_fraction() * 100.0
    );
    for e in params.entries().iter().take(6) {
        println!("  {:<22} {:?} {:?}", e.name, e.tensor.shape(), e.tag);
    }
    println!("  ...");

    let (loss0, acc0) = evaluate(&config, &params, &test.images, &test.labels, 64)?;
    println!("\nbefore training: loss {loss0:.4}, accuracy {acc0:.3}");

    let trained = train_epochs(
        &config,
        &params,
        &train.images,
        &train.labels,
        &OptimizerSpec::adam(0.001),
        3,
        &TrainOpts {
            batch_size: 32,
            shuffle_seed: 7,
        },
    )?;
    let (loss1, acc1) = evaluate(&config, &trained, &test.images, &test.labels, 64)?;
    println!("after 3 epochs:  loss {loss1:.4}, accuracy {acc1:.3}");

    // binary round trip
    let mut bytes = Vec::new();
    trained.write_to(&mut bytes)?;
    let back = ParameterBundle::read_from(&mut bytes.as_slice())?;
    println!(
        "\nserialized {} bytes; round trip identical: {}",
        bytes.len(),
        back.flatten()
            .iter()
            .zip(trained.flatten().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    );
    Ok(())
}
