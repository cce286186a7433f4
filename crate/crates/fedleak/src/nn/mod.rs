//! Small CNN/MLP models over the graph engine, with a parameter registry
//! that tags batch-norm parameters for masking exemption.

mod build;
mod bundle;
mod train;

pub use build::{build_model, compile, init_params, BnMode, BnStatNodes, ModelGraph};
pub(crate) use build::{compile_parts, TargetMode};
pub use bundle::{BundleEntry, ParamTag, ParameterBundle};
pub use train::{evaluate, loss_and_gradients, make_batch, train_epochs, OptimizerSpec, TrainOpts};

use crate::error::{Error, Result};
use crate::tensor::Precision;

pub const BN_EPS: f64 = 1e-5;
/// Momentum for the running-statistics update during training.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Stride-1 same-padded convolution, no bias (pair with batch norm).
    Conv { channels: usize, kernel: usize },
    Dense { units: usize },
    Relu,
    /// 2x2 average pooling.
    Pool,
    BatchNorm,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub tag: ParamTag,
}

impl LayerSpec {
    pub fn conv(channels: usize, kernel: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv { channels, kernel },
            tag: ParamTag::Maskable,
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { units },
            tag: ParamTag::Maskable,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            tag: ParamTag::Maskable,
        }
    }

    pub fn pool() -> Self {
        LayerSpec {
            kind: LayerKind::Pool,
            tag: ParamTag::Maskable,
        }
    }

    pub fn batchnorm() -> Self {
        LayerSpec {
            kind: LayerKind::BatchNorm,
            tag: ParamTag::MaskExempt,
        }
    }

    pub fn flatten() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            tag: ParamTag::Maskable,
        }
    }
}

/// Model architecture plus initialization seed. The classifier head
/// (flatten + dense to `classes`) is appended automatically.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input shape as (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn new(input: (usize, usize, usize), classes: usize, layers: Vec<LayerSpec>, seed: u64) -> Self {
        ModelConfig {
            input,
            classes,
            layers,
            seed,
            precision: Precision::F64,
        }
    }

    /// The default desk-scale CNN: two conv+BN+ReLU+pool blocks and a dense
    /// head. Exercises convolution, batch-norm exemption and pooling while
    /// staying small enough for minutes-scale inversion attacks.
    pub fn default_cnn(input: (usize, usize, usize), classes: usize, seed: u64) -> Self {
        ModelConfig::new(
            input,
            classes,
            vec![
                LayerSpec::conv(8, 3),
                LayerSpec::batchnorm(),
                LayerSpec::relu(),
                LayerSpec::pool(),
                LayerSpec::conv(16, 3),
                LayerSpec::batchnorm(),
                LayerSpec::relu(),
                LayerSpec::pool(),
            ],
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::ModelBuild {
                layer: "head".into(),
                reason: format!("class count must be at least 2, got {}", self.classes),
            });
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::ModelBuild {
                layer: "input".into(),
                reason: format!("degenerate input shape {:?}", self.input),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kind == LayerKind::BatchNorm && l.tag != ParamTag::MaskExempt {
                return Err(Error::ModelBuild {
                    layer: format!("layer {i}"),
                    reason: "batchnorm layers must carry the mask_exempt tag".into(),
                });
            }
        }
        Ok(())
    }
}
