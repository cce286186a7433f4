//! Desk-scale federated learning with gradient obfuscation defenses and a
//! gradient-inversion attack harness.
//!
//! The crate simulates the full loop of interest when studying parameter
//! leakage in federated learning:
//!
//! * [`graph`] / [`tensor`] — dense tensors and reverse-mode differentiation,
//!   including second-order support (gradients of parameter gradients with
//!   respect to network inputs);
//! * [`nn`] — small CNN/MLP models with a tagged parameter registry;
//! * [`obfuscate`] — the four client-side transforms: masking, noising,
//!   clipping, pruning;
//! * [`aggregate`] — NaN-aware coordinate-wise mean/median aggregation;
//! * [`protocol`] — the round loop with IID and Dirichlet partitioning;
//! * [`attack`] — gradient-matching reconstruction of private training
//!   images from intercepted gradients, with analytic label inference;
//! * [`metrics`] — SSIM and the brightness-sweep leakage score;
//! * [`data`] — MNIST IDX and CIFAR-10 binary loaders plus synthetic
//!   datasets for fully offline runs;
//! * [`harness`] — config-driven experiments (threshold sweep, convergence
//!   comparison, attack demo) emitting CSVs and summary tables.
//!
//! Start with the `examples/` directory; each file exercises one capability
//! end to end.

pub mod aggregate;
pub mod attack;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod obfuscate;
pub mod pixmap;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
