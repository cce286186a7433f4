//! Local training: loss/gradient computation, Adam and SGD, epoch loops.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::{compile, BnMode, ModelConfig, ModelGraph, ParameterBundle, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::graph::Values;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerSpec {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl OptimizerSpec {
    /// Adam with the conventional moment coefficients.
    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerSpec::Sgd { lr }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOpts {
    pub batch_size: usize,
    /// Seed for the per-epoch shuffle; derive per (round, client) in
    /// federated runs so parallel clients stay reproducible.
    pub shuffle_seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            batch_size: 32,
            shuffle_seed: 0,
        }
    }
}

/// Assemble `[batch, c, h, w]` images and one-hot targets from dataset
/// slices.
pub fn make_batch(
    images: &[Tensor],
    labels: &[usize],
    classes: usize,
    idxs: &[usize],
) -> Result<(Tensor, Tensor)> {
    debug_assert!(!idxs.is_empty());
    let shape = images[idxs[0]].shape();
    let per = images[idxs[0]].len();
    let mut data = Vec::with_capacity(idxs.len() * per);
    let mut onehot = Tensor::zeros(&[idxs.len(), classes]);
    for (row, &i) in idxs.iter().enumerate() {
        data.extend_from_slice(images[i].data());
        let label = labels[i];
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
            });
        }
        onehot.data_mut()[row * classes + label] = 1.0;
    }
    let mut full = vec![idxs.len()];
    full.extend_from_slice(shape);
    Ok((Tensor::from_vec(&full, data)?, onehot))
}

fn feeds_for(
    model: &ModelGraph,
    params: &ParameterBundle,
    batch: &Tensor,
    targets: Option<&Tensor>,
) -> HashMap<String, Tensor> {
    let mut feeds = params.to_feeds();
    feeds.insert("input".into(), batch.clone());
    if let (Some(t), Some(_)) = (targets, model.targets) {
        feeds.insert("targets".into(), t.clone());
    }
    feeds
}

/// Gradients aligned with the bundle layout; entries without a node in the
/// graph (running statistics in batch mode) come back as zeros.
fn bundle_gradients(
    model: &ModelGraph,
    values: &Values,
    params: &ParameterBundle,
) -> Result<ParameterBundle> {
    let loss = model
        .loss
        .ok_or_else(|| Error::InvalidGraph("model compiled without a loss".into()))?;
    let wrt: Vec<_> = params
        .entries()
        .iter()
        .filter(|e| e.trainable())
        .filter_map(|e| model.param_node(&e.name))
        .collect();
    let grads = model.graph.gradients(values, loss, &wrt)?;
    let mut by_node: HashMap<usize, Tensor> = wrt.into_iter().zip(grads).collect();
    let mut out = params.zeros_like();
    for entry in out.entries_mut() {
        if !entry.trainable() {
            continue;
        }
        if let Some(node) = model.param_node(&entry.name) {
            if let Some(g) = by_node.remove(&node) {
                entry.tensor = g;
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy over a batch and its parameter gradients, computed
/// with batch-mode batch norm.
pub fn loss_and_gradients(
    config: &ModelConfig,
    params: &ParameterBundle,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(f64, ParameterBundle)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::DatasetTooSmall(format!(
            "batch of {} images / {} labels",
            images.len(),
            labels.len()
        )));
    }
    if !params.is_dense() {
        return Err(Error::NonFiniteInput {
            context: "parameter bundle (densify masked bundles before training)".into(),
        });
    }
    let idxs: Vec<usize> = (0..images.len()).collect();
    let (batch, targets) = make_batch(images, labels, config.classes, &idxs)?;
    let model = compile(config, images.len(), BnMode::Batch, true)?;
    let feeds = feeds_for(&model, params, &batch, Some(&targets));
    let values = model.graph.evaluate(&feeds)?;
    let loss = values.get(model.loss.unwrap()).item();
    let grads = bundle_gradients(&model, &values, params)?;
    Ok((loss, grads))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

fn apply_update(
    params: &mut ParameterBundle,
    grads: &ParameterBundle,
    opt: &OptimizerSpec,
    adam: &mut Option<AdamState>,
) {
    match *opt {
        OptimizerSpec::Sgd { lr } => {
            for (p, g) in params.entries_mut().iter_mut().zip(grads.entries()) {
                if !p.trainable() {
                    continue;
                }
                for (pv, gv) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        OptimizerSpec::Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } => {
            let n = params.total_count();
            let state = adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            state.t += 1;
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            let mut offset = 0;
            for (p, g) in params.entries_mut().iter_mut().zip(grads.entries()) {
                let len = p.tensor.len();
                if p.trainable() {
                    let m = &mut state.m[offset..offset + len];
                    let v = &mut state.v[offset..offset + len];
                    for (((pv, &gv), mv), vv) in p
                        .tensor
                        .data_mut()
                        .iter_mut()
                        .zip(g.tensor.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let grad = gv + weight_decay * *pv;
                        *mv = beta1 * *mv + (1.0 - beta1) * grad;
                        *vv = beta2 * *vv + (1.0 - beta2) * grad * grad;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                offset += len;
            }
        }
    }
}

fn update_running_stats(
    params: &mut ParameterBundle,
    model: &ModelGraph,
    values: &Values,
) {
    for stat in &model.bn_stats {
        let mean = values.get(stat.mean).clone();
        let var = values.get(stat.var).clone();
        for entry in params.entries_mut() {
            let source = if entry.name == stat.running_mean {
                Some(&mean)
            } else if entry.name == stat.running_var {
                Some(&var)
            } else {
                None
            };
            if let Some(s) = source {
                for (r, &b) in entry.tensor.data_mut().iter_mut().zip(s.data()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

/// Train for `epochs` passes over the shard and return the updated bundle.
/// Optimizer state is fresh for every call, matching a federated client that
/// restarts from the central model each round.
pub fn train_epochs(
    config: &ModelConfig,
    params: &ParameterBundle,
    images: &[Tensor],
    labels: &[usize],
    opt: &OptimizerSpec,
    epochs: usize,
    opts: &TrainOpts,
) -> Result<ParameterBundle> {
    if images.is_empty() {
        return Err(Error::EmptyShard(0));
    }
    if epochs == 0 {
        return Err(Error::InvalidHyperparameter("epochs must be >= 1".into()));
    }
    if !params.is_dense() {
        return Err(Error::NonFiniteInput {
            context: "parameter bundle".into(),
        });
    }
    let mut params = params.clone();
    let mut adam = None;
    let mut graphs: HashMap<usize, ModelGraph> = HashMap::new();
    let mut order: Vec<usize> = (0..images.len()).collect();

    for epoch in 0..epochs {
        let mut shuffle_rng = rng::stream(opts.shuffle_seed, &[0x5u64, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let (batch, targets) = make_batch(images, labels, config.classes, chunk)?;
            let model = match graphs.entry(chunk.len()) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(compile(config, chunk.len(), BnMode::Batch, true)?)
                }
            };
            let feeds = feeds_for(model, &params, &batch, Some(&targets));
            let values = model.graph.evaluate(&feeds)?;
            let grads = bundle_gradients(model, &values, &params)?;
            apply_update(&mut params, &grads, opt, &mut adam);
            update_running_stats(&mut params, model, &values);
        }
    }
    Ok(params)
}

/// Central evaluation with running statistics: mean cross-entropy and
/// accuracy over a held-out set.
pub fn evaluate(
    config: &ModelConfig,
    params: &ParameterBundle,
    images: &[Tensor],
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Err(Error::DatasetTooSmall("empty evaluation set".into()));
    }
    let idxs: Vec<usize> = (0..images.len()).collect();
    let mut graphs: HashMap<usize, ModelGraph> = HashMap::new();
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (batch, targets) = make_batch(images, labels, config.classes, chunk)?;
        let model = match graphs.entry(chunk.len()) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(compile(config, chunk.len(), BnMode::Given, true)?)
            }
        };
        let feeds = feeds_for(model, params, &batch, Some(&targets));
        let values = model.graph.evaluate(&feeds)?;
        total_loss += values.get(model.loss.unwrap()).item() * chunk.len() as f64;
        let logits = values.get(model.logits);
        for (row, &i) in chunk.iter().enumerate() {
            let row_logits = &logits.data()[row * config.classes..(row + 1) * config.classes];
            // total_cmp keeps diverged (non-finite) models scorable
            let pred = row_logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .unwrap();
            if pred == labels[i] {
                correct += 1;
            }
        }
    }
    Ok((
        total_loss / images.len() as f64,
        correct as f64 / images.len() as f64,
    ))
}
