//! Reverse-mode differentiation on a hand-built graph, checked against
//! central finite differences.
//!
//! Run with: cargo run --release --example autodiff_basics

use std::collections::HashMap;

use fedleak::graph::{GraphBuilder, Padding};
use fedleak::tensor::{Precision, Tensor};

fn main() -> fedleak::Result<()> {
    // loss = softmax_ce(dense(pool(relu(conv(x)))))
    let mut b = GraphBuilder::new(Precision::F64);
    let x = b.leaf("x", &[1, 1, 6, 6])?;
    let kernel = b.leaf("kernel", &[2, 1, 3, 3])?;
    let conv = b.conv2d(x, kernel, Padding::Same)?;
    let act = b.relu(conv)?;
    let pooled = b.avg_pool2(act)?;
    let flat = b.reshape(pooled, &[1, 18])?;
    let w = b.leaf("w", &[18, 3])?;
    let logits = b.matmul(flat, w, false, false)?;
    let onehot = b.constant(Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0])?)?;
    let loss = b.softmax_cross_entropy(logits, onehot)?;
    let graph = b.finish(vec![("loss".into(), loss)])?;

    let mut feeds: HashMap<String, Tensor> = HashMap::new();
    for (name, shape, seed) in [
        ("x", vec![1usize, 1, 6, 6], 1u64),
        ("kernel", vec![2, 1, 3, 3], 2),
        ("w", vec![18, 3], 3),
    ] {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| fedleak::rng::unit_uniform(seed, i as u64) - 0.5)
            .collect();
        feeds.insert(name.into(), Tensor::from_vec(&shape, data)?);
    }

    let values = graph.evaluate(&feeds)?;
    println!("loss = {:.6}", values.get(loss).item());

    // reverse-mode gradients for every leaf
    let grads = graph.gradients(&values, loss, &[x, kernel, w])?;

    // central finite differences as the independent check
    println!("\nmax |grad - finite difference| per input:");
    for (gi, name) in [(0usize, "x"), (1, "kernel"), (2, "w")] {
        let base = &feeds[name];
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let probe = |delta: f64| -> f64 {
                let mut f = feeds.clone();
                f.get_mut(name).unwrap().data_mut()[i] += delta;
                graph.evaluate(&f).unwrap().get(loss).item()
            };
            let fd = (probe(1e-5) - probe(-1e-5)) / 2e-5;
            worst = worst.max((grads[gi].data()[i] - fd).abs());
        }
        println!("  {name:>6}: {worst:.3e}");
    }

    // identical inputs give bit-identical results
    let again = graph.evaluate(&feeds)?;
    println!(
        "\ndeterministic: {}",
        again.get(loss).item() == values.get(loss).item()
    );
    Ok(())
}
