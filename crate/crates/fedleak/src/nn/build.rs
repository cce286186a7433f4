//! Graph compilation and parameter initialization for [`ModelConfig`].

use rand::Rng;
use rand_distr::StandardNormal;

use super::{BundleEntry, LayerKind, ModelConfig, ParamTag, ParameterBundle, BN_EPS};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId, Padding};
use crate::rng;
use crate::tensor::Tensor;

/// How batch-norm statistics are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics computed from the batch; exposes the stat nodes so a
    /// trainer can update running statistics.
    Batch,
    /// Statistics read from the `running_mean` / `running_var` bundle
    /// entries. Used for central evaluation and for attack graphs, where a
    /// single dummy sample makes batch statistics degenerate.
    Given,
}

/// Batch-statistics nodes of one batch-norm layer, for the running update.
#[derive(Debug, Clone)]
pub struct BnStatNodes {
    pub mean: NodeId,
    pub var: NodeId,
    pub running_mean: String,
    pub running_var: String,
}

/// A compiled model: the frozen graph plus handles into it.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub graph: Graph,
    pub batch: usize,
    pub input: NodeId,
    /// One-hot (or soft) target leaf; present when compiled with a loss.
    pub targets: Option<NodeId>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    /// Leaf node per parameter entry that participates in the graph.
    pub params: Vec<(String, NodeId)>,
    pub bn_stats: Vec<BnStatNodes>,
}

impl ModelGraph {
    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }
}

enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

struct LayerNames {
    conv: usize,
    bn: usize,
    dense: usize,
}

/// Walk the layer chain, calling `f` for every parameter entry in bundle
/// order. Keeps initialization and graph compilation positionally aligned.
fn walk_params(
    config: &ModelConfig,
    mut f: impl FnMut(&str, &[usize], ParamTag, Fan),
) -> Result<()> {
    config.validate()?;
    let (c, h, w) = config.input;
    let mut shape = Shape::Spatial(c, h, w);
    let mut names = LayerNames {
        conv: 0,
        bn: 0,
        dense: 0,
    };
    for (i, layer) in config.layers.iter().enumerate() {
        let fail = |reason: String| Error::ModelBuild {
            layer: format!("layer {i} ({:?})", layer.kind),
            reason,
        };
        match layer.kind {
            LayerKind::Conv { channels, kernel } => {
                let Shape::Spatial(ci, hh, ww) = shape else {
                    return Err(fail("convolution requires spatial input".into()));
                };
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(fail(format!("kernel size must be odd, got {kernel}")));
                }
                names.conv += 1;
                f(
                    &format!("conv{}.weight", names.conv),
                    &[channels, ci, kernel, kernel],
                    layer.tag,
                    Fan(ci * kernel * kernel),
                );
                shape = Shape::Spatial(channels, hh, ww);
            }
            LayerKind::BatchNorm => {
                let channels = match shape {
                    Shape::Spatial(c, _, _) => c,
                    Shape::Flat(u) => u,
                };
                names.bn += 1;
                let base = format!("bn{}", names.bn);
                f(&format!("{base}.scale"), &[channels], layer.tag, Fan(0));
                f(&format!("{base}.shift"), &[channels], layer.tag, Fan(0));
                f(&format!("{base}.running_mean"), &[channels], layer.tag, Fan(0));
                f(&format!("{base}.running_var"), &[channels], layer.tag, Fan(0));
            }
            LayerKind::Relu => {}
            LayerKind::Pool => {
                let Shape::Spatial(c, hh, ww) = shape else {
                    return Err(fail("pooling requires spatial input".into()));
                };
                if hh % 2 != 0 || ww % 2 != 0 {
                    return Err(fail(format!("pooling needs even spatial dims, got {hh}x{ww}")));
                }
                shape = Shape::Spatial(c, hh / 2, ww / 2);
            }
            LayerKind::Flatten => {
                if let Shape::Spatial(c, hh, ww) = shape {
                    shape = Shape::Flat(c * hh * ww);
                }
            }
            LayerKind::Dense { units } => {
                let fan_in = match shape {
                    Shape::Spatial(c, hh, ww) => c * hh * ww, // implicit flatten
                    Shape::Flat(u) => u,
                };
                names.dense += 1;
                let base = format!("dense{}", names.dense);
                f(&format!("{base}.weight"), &[fan_in, units], layer.tag, Fan(fan_in));
                f(&format!("{base}.bias"), &[units], layer.tag, Fan(0));
                shape = Shape::Flat(units);
            }
        }
    }
    // classifier head
    let fan_in = match shape {
        Shape::Spatial(c, hh, ww) => c * hh * ww,
        Shape::Flat(u) => u,
    };
    f(
        "head.weight",
        &[fan_in, config.classes],
        ParamTag::Maskable,
        Fan(fan_in),
    );
    f("head.bias", &[config.classes], ParamTag::Maskable, Fan(0));
    Ok(())
}

struct Fan(usize);

/// Deterministic parameter initialization: He fan-in scaling for weights,
/// zeros for biases and shifts, ones for scales and running variances.
pub fn init_params(config: &ModelConfig) -> Result<ParameterBundle> {
    let mut entries = Vec::new();
    let mut index = 0u64;
    walk_params(config, |name, shape, tag, fan| {
        let tensor = if name.ends_with(".weight") {
            let std = (2.0 / fan.0 as f64).sqrt();
            let mut stream = rng::stream(config.seed, &[0x1417, index]);
            let data = (0..crate::tensor::numel(shape))
                .map(|_| {
                    let z: f64 = stream.sample(StandardNormal);
                    z * std
                })
                .collect();
            Tensor::from_vec(shape, data).expect("init shape")
        } else if name.ends_with(".scale") || name.ends_with(".running_var") {
            Tensor::filled(shape, 1.0)
        } else {
            Tensor::zeros(shape)
        };
        entries.push(BundleEntry {
            name: name.to_string(),
            tensor,
            tag,
        });
        index += 1;
    })?;
    ParameterBundle::new(entries)
}

/// How the cross-entropy target row is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TargetMode {
    /// A probability row fed directly (one-hot for hard labels).
    Leaf,
    /// Softmax of a free logit leaf, for jointly optimizing a soft label.
    SoftmaxOfLeaf,
}

/// Unfinished compilation: the builder plus handles, so callers can append
/// more nodes (symbolic gradients, matching objectives) before freezing.
pub(crate) struct GraphParts {
    pub builder: GraphBuilder,
    pub input: NodeId,
    pub targets: Option<NodeId>,
    /// The free logit leaf in [`TargetMode::SoftmaxOfLeaf`].
    pub target_logits: Option<NodeId>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    pub params: Vec<(String, NodeId)>,
    pub bn_stats: Vec<BnStatNodes>,
}

impl GraphParts {
    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }
}

/// Compile the architecture into a graph for one batch size.
pub fn compile(
    config: &ModelConfig,
    batch: usize,
    bn_mode: BnMode,
    with_loss: bool,
) -> Result<ModelGraph> {
    let parts = compile_parts(config, batch, bn_mode, with_loss, TargetMode::Leaf)?;
    let mut outputs = vec![("logits".to_string(), parts.logits)];
    if let Some(l) = parts.loss {
        outputs.push(("loss".to_string(), l));
    }
    let graph = parts.builder.finish(outputs)?;
    Ok(ModelGraph {
        graph,
        batch,
        input: parts.input,
        targets: parts.targets,
        logits: parts.logits,
        loss: parts.loss,
        params: parts.params,
        bn_stats: parts.bn_stats,
    })
}

pub(crate) fn compile_parts(
    config: &ModelConfig,
    batch: usize,
    bn_mode: BnMode,
    with_loss: bool,
    target_mode: TargetMode,
) -> Result<GraphParts> {
    config.validate()?;
    if batch == 0 {
        return Err(Error::ModelBuild {
            layer: "input".into(),
            reason: "batch size must be positive".into(),
        });
    }
    let mut b = GraphBuilder::new(config.precision);
    let (c, h, w) = config.input;
    let input = b.leaf("input", &[batch, c, h, w])?;
    let mut params: Vec<(String, NodeId)> = Vec::new();
    let mut bn_stats = Vec::new();

    let leaf =
        |b: &mut GraphBuilder, params: &mut Vec<(String, NodeId)>, name: &str, shape: &[usize]| {
            let id = b.leaf(name, shape)?;
            params.push((name.to_string(), id));
            Ok::<NodeId, Error>(id)
        };

    let mut shape = Shape::Spatial(c, h, w);
    let mut x = input;
    let mut names = LayerNames {
        conv: 0,
        bn: 0,
        dense: 0,
    };
    for (i, layer) in config.layers.iter().enumerate() {
        let fail = |reason: String| Error::ModelBuild {
            layer: format!("layer {i} ({:?})", layer.kind),
            reason,
        };
        match layer.kind {
            LayerKind::Conv { channels, kernel } => {
                let Shape::Spatial(ci, hh, ww) = shape else {
                    return Err(fail("convolution requires spatial input".into()));
                };
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(fail(format!("kernel size must be odd, got {kernel}")));
                }
                names.conv += 1;
                let k = leaf(
                    &mut b,
                    &mut params,
                    &format!("conv{}.weight", names.conv),
                    &[channels, ci, kernel, kernel],
                )?;
                x = b.conv2d(x, k, Padding::Same)?;
                shape = Shape::Spatial(channels, hh, ww);
            }
            LayerKind::BatchNorm => {
                // flat activations are normalized per unit via a [b,u,1,1] view
                let (channels, restore) = match shape {
                    Shape::Spatial(c, _, _) => (c, None),
                    Shape::Flat(u) => {
                        x = b.reshape(x, &[batch, u, 1, 1])?;
                        (u, Some(u))
                    }
                };
                names.bn += 1;
                let base = format!("bn{}", names.bn);
                let scale = leaf(&mut b, &mut params, &format!("{base}.scale"), &[channels])?;
                let shift = leaf(&mut b, &mut params, &format!("{base}.shift"), &[channels])?;
                let (mean, var) = match bn_mode {
                    BnMode::Given => {
                        let m = leaf(
                            &mut b,
                            &mut params,
                            &format!("{base}.running_mean"),
                            &[channels],
                        )?;
                        let v = leaf(
                            &mut b,
                            &mut params,
                            &format!("{base}.running_var"),
                            &[channels],
                        )?;
                        (m, v)
                    }
                    BnMode::Batch => {
                        let sx = b.shape_of(x).to_vec();
                        let denom = 1.0 / (sx[0] * sx[2] * sx[3]) as f64;
                        let csum = b.channel_sum(x)?;
                        let mean = b.scale(csum, denom)?;
                        let centered0 = b.sub_channel(x, mean)?;
                        let sq = b.mul(centered0, centered0)?;
                        let sqsum = b.channel_sum(sq)?;
                        let var = b.scale(sqsum, denom)?;
                        bn_stats.push(BnStatNodes {
                            mean,
                            var,
                            running_mean: format!("{base}.running_mean"),
                            running_var: format!("{base}.running_var"),
                        });
                        (mean, var)
                    }
                };
                let centered = b.sub_channel(x, mean)?;
                let inv_std = b.rsqrt_eps(var, BN_EPS)?;
                let gain = b.mul(scale, inv_std)?;
                let scaled = b.mul_channel(centered, gain)?;
                x = b.add_channel(scaled, shift)?;
                if let Some(u) = restore {
                    x = b.reshape(x, &[batch, u])?;
                }
            }
            LayerKind::Relu => {
                x = b.relu(x)?;
            }
            LayerKind::Pool => {
                let Shape::Spatial(c, hh, ww) = shape else {
                    return Err(fail("pooling requires spatial input".into()));
                };
                if hh % 2 != 0 || ww % 2 != 0 {
                    return Err(fail(format!("pooling needs even spatial dims, got {hh}x{ww}")));
                }
                x = b.avg_pool2(x)?;
                shape = Shape::Spatial(c, hh / 2, ww / 2);
            }
            LayerKind::Flatten => {
                if let Shape::Spatial(c, hh, ww) = shape {
                    x = b.reshape(x, &[batch, c * hh * ww])?;
                    shape = Shape::Flat(c * hh * ww);
                }
            }
            LayerKind::Dense { units } => {
                let fan_in = match shape {
                    Shape::Spatial(c, hh, ww) => {
                        let u = c * hh * ww;
                        x = b.reshape(x, &[batch, u])?;
                        u
                    }
                    Shape::Flat(u) => u,
                };
                names.dense += 1;
                let base = format!("dense{}", names.dense);
                let wt = leaf(&mut b, &mut params, &format!("{base}.weight"), &[fan_in, units])?;
                let bias = leaf(&mut b, &mut params, &format!("{base}.bias"), &[units])?;
                let mm = b.matmul(x, wt, false, false)?;
                x = b.add_bias(mm, bias)?;
                shape = Shape::Flat(units);
            }
        }
    }

    let fan_in = match shape {
        Shape::Spatial(c, hh, ww) => {
            let u = c * hh * ww;
            x = b.reshape(x, &[batch, u])?;
            u
        }
        Shape::Flat(u) => u,
    };
    let wt = leaf(&mut b, &mut params, "head.weight", &[fan_in, config.classes])?;
    let bias = leaf(&mut b, &mut params, "head.bias", &[config.classes])?;
    let mm = b.matmul(x, wt, false, false)?;
    let logits = b.add_bias(mm, bias)?;

    let (targets, target_logits, loss) = if with_loss {
        match target_mode {
            TargetMode::Leaf => {
                let t = b.leaf("targets", &[batch, config.classes])?;
                let l = b.softmax_cross_entropy(logits, t)?;
                (Some(t), None, Some(l))
            }
            TargetMode::SoftmaxOfLeaf => {
                let raw = b.leaf("target_logits", &[batch, config.classes])?;
                let t = b.softmax(raw)?;
                let l = b.softmax_cross_entropy(logits, t)?;
                (Some(t), Some(raw), Some(l))
            }
        }
    } else {
        (None, None, None)
    };

    Ok(GraphParts {
        builder: b,
        input,
        targets,
        target_logits,
        logits,
        loss,
        params,
        bn_stats,
    })
}

/// Convenience wrapper: a training-mode graph plus freshly initialized
/// parameters.
pub fn build_model(config: &ModelConfig, batch: usize) -> Result<(ModelGraph, ParameterBundle)> {
    let params = init_params(config)?;
    let graph = compile(config, batch, BnMode::Batch, true)?;
    Ok((graph, params))
}
