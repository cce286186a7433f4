//! Server-side, NaN-aware aggregation of client submissions.
//!
//! Masked (NaN) values are excluded per coordinate. A coordinate that ends
//! up with no contributors falls back to the previous central value, so the
//! output is always dense. For bit-reproducibility under submission
//! reordering, contributors are sorted before summation.

use crate::error::{Error, Result};
use crate::nn::ParameterBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationKind {
    Mean,
    Median,
}

impl AggregationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationKind::Mean => "mean",
            AggregationKind::Median => "median",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AggregationKind::Mean),
            "median" => Ok(AggregationKind::Median),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// Aggregation rule plus the previous central bundle used when a coordinate
/// has no surviving contributors.
#[derive(Debug, Clone)]
pub struct AggregationSpec<'a> {
    pub kind: AggregationKind,
    pub fallback: &'a ParameterBundle,
}

fn check_inputs(submissions: &[ParameterBundle], fallback: &ParameterBundle) -> Result<()> {
    if submissions.is_empty() {
        return Err(Error::EmptySubmissions);
    }
    for (i, s) in submissions.iter().enumerate() {
        if !s.aligned_with(fallback) {
            return Err(Error::BundleMismatch(format!(
                "submission {i} is not aligned with the central bundle"
            )));
        }
    }
    if !fallback.is_dense() {
        return Err(Error::NonFiniteInput {
            context: "aggregation fallback bundle".into(),
        });
    }
    Ok(())
}

/// Coordinate-wise scalar reduction over the sorted non-NaN contributors.
fn reduce(sorted: &[f64], kind: AggregationKind) -> f64 {
    debug_assert!(!sorted.is_empty());
    match kind {
        AggregationKind::Mean => {
            // identical contributors average to themselves exactly
            if sorted[0] == sorted[sorted.len() - 1] {
                return sorted[0];
            }
            sorted.iter().sum::<f64>() / sorted.len() as f64
        }
        AggregationKind::Median => {
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                (sorted[mid - 1] + sorted[mid]) / 2.0
            }
        }
    }
}

/// NaN-aware coordinate-wise aggregation; always returns a dense bundle.
pub fn aggregate(submissions: &[ParameterBundle], spec: &AggregationSpec) -> Result<ParameterBundle> {
    check_inputs(submissions, spec.fallback)?;
    let flats: Vec<Vec<f64>> = submissions.iter().map(|s| s.flatten()).collect();
    let fallback_flat = spec.fallback.flatten();
    let mut out = Vec::with_capacity(fallback_flat.len());
    let mut scratch = Vec::with_capacity(flats.len());
    for (coord, &fb) in fallback_flat.iter().enumerate() {
        scratch.clear();
        for f in &flats {
            let v = f[coord];
            if !v.is_nan() {
                scratch.push(v);
            }
        }
        if scratch.is_empty() {
            out.push(fb);
        } else {
            scratch.sort_by(f64::total_cmp);
            out.push(reduce(&scratch, spec.kind));
        }
    }
    spec.fallback.unflatten_like(&out)
}

/// Shard-size-weighted NaN-aware mean (FedAvg weighting). Weights are
/// renormalized over the surviving contributors per coordinate.
pub fn weighted_mean(
    submissions: &[ParameterBundle],
    weights: &[f64],
    fallback: &ParameterBundle,
) -> Result<ParameterBundle> {
    check_inputs(submissions, fallback)?;
    if weights.len() != submissions.len() {
        return Err(Error::BundleMismatch(format!(
            "{} weights for {} submissions",
            weights.len(),
            submissions.len()
        )));
    }
    if weights.iter().any(|w| w.is_nan() || *w <= 0.0) {
        return Err(Error::InvalidHyperparameter(
            "aggregation weights must be positive".into(),
        ));
    }
    let flats: Vec<Vec<f64>> = submissions.iter().map(|s| s.flatten()).collect();
    let fallback_flat = fallback.flatten();
    let mut out = Vec::with_capacity(fallback_flat.len());
    let mut scratch: Vec<(f64, f64)> = Vec::with_capacity(flats.len());
    for (coord, &fb) in fallback_flat.iter().enumerate() {
        scratch.clear();
        for (f, &w) in flats.iter().zip(weights) {
            let v = f[coord];
            if !v.is_nan() {
                scratch.push((v, w));
            }
        }
        if scratch.is_empty() {
            out.push(fb);
            continue;
        }
        scratch.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        if scratch[0].0 == scratch[scratch.len() - 1].0 {
            out.push(scratch[0].0);
            continue;
        }
        let wsum: f64 = scratch.iter().map(|(_, w)| w).sum();
        let vsum: f64 = scratch.iter().map(|(v, w)| v * w).sum();
        out.push(vsum / wsum);
    }
    fallback.unflatten_like(&out)
}

/// Non-NaN contributor count per coordinate, in bundle-flat order.
pub fn contributor_counts(submissions: &[ParameterBundle]) -> Result<Vec<u32>> {
    if submissions.is_empty() {
        return Err(Error::EmptySubmissions);
    }
    for (i, s) in submissions.iter().enumerate() {
        if !s.aligned_with(&submissions[0]) {
            return Err(Error::BundleMismatch(format!(
                "submission {i} is not aligned with submission 0"
            )));
        }
    }
    let flats: Vec<Vec<f64>> = submissions.iter().map(|s| s.flatten()).collect();
    let n = flats[0].len();
    let mut counts = vec![0u32; n];
    for f in &flats {
        for (c, v) in counts.iter_mut().zip(f) {
            if !v.is_nan() {
                *c += 1;
            }
        }
    }
    Ok(counts)
}
