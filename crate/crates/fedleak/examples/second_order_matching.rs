//! Gradients of parameter gradients: the machinery behind the inversion
//! attack. Builds a model, appends its backward pass to the graph as nodes,
//! forms the gradient-matching objective, then differentiates that with
//! respect to the input image.
//!
//! Run with: cargo run --release --example second_order_matching

use std::collections::HashMap;

use fedleak::graph::GraphBuilder;
use fedleak::tensor::{Precision, Tensor};

fn main() -> fedleak::Result<()> {
    let (pixels, classes) = (6usize, 3usize);

    let rand = |shape: &[usize], seed: u64| -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| fedleak::rng::unit_uniform(seed, i as u64) - 0.5)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    };

    // dense softmax model with fixed weights
    let mut b = GraphBuilder::new(Precision::F64);
    let x = b.leaf("x", &[1, pixels])?;
    let w = b.constant(rand(&[pixels, classes], 1))?;
    let bias = b.constant(rand(&[classes], 2))?;
    let mm = b.matmul(x, w, false, false)?;
    let logits = b.add_bias(mm, bias)?;
    let onehot = b.constant(Tensor::from_vec(&[1, classes], vec![1.0, 0.0, 0.0])?)?;
    let loss = b.softmax_cross_entropy(logits, onehot)?;

    // the backward pass becomes part of the graph: dL/dW and dL/db are nodes
    let grads = b.gradient_nodes(loss, &[w, bias])?;
    println!("appended symbolic gradients: {} nodes total", b.len());

    // matching objective sum((dL/dW - G)^2) against fixed targets
    let mut matching = None;
    for (g, seed) in grads.iter().zip([3u64, 4]) {
        let shape = b.shape_of(*g).to_vec();
        let target = b.constant(rand(&shape, seed))?;
        let diff = b.sub(*g, target)?;
        let sq = b.mul(diff, diff)?;
        let term = b.sum(sq)?;
        matching = Some(match matching {
            None => term,
            Some(m) => b.add(m, term)?,
        });
    }
    let matching = matching.unwrap();
    let graph = b.finish(vec![("matching".into(), matching)])?;

    let mut feeds: HashMap<String, Tensor> = HashMap::new();
    feeds.insert("x".into(), rand(&[1, pixels], 5));
    let values = graph.evaluate(&feeds)?;
    println!("matching loss = {:.6}", values.get(matching).item());

    // d(matching)/d(image): numeric backward over the extended graph
    let input_grad = graph.gradients(&values, matching, &[x])?;
    println!("\npixel      d(matching)/dx    finite diff");
    for i in 0..pixels {
        let probe = |delta: f64| -> f64 {
            let mut f = feeds.clone();
            f.get_mut("x").unwrap().data_mut()[i] += delta;
            graph.evaluate(&f).unwrap().get(matching).item()
        };
        let fd = (probe(1e-5) - probe(-1e-5)) / 2e-5;
        println!("  {i}       {:+.8}      {fd:+.8}", input_grad[0].data()[i]);
    }
    Ok(())
}
