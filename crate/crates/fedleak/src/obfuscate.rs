//! Client-side parameter obfuscation: masking, noising, clipping, pruning.
//!
//! Masking replaces a random fraction of values with NaN so they drop out of
//! aggregation entirely; it skips `mask_exempt` entries because NaN inside
//! normalization statistics breaks every downstream activation. Noising,
//! clipping and pruning operate on all parameters. Clip/prune thresholds are
//! per-entry percentiles of absolute values with linear interpolation
//! between closest ranks.

use crate::error::{Error, Result};
use crate::nn::{ParamTag, ParameterBundle};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObfuscationMethod {
    None,
    Mask,
    Noise,
    Clip,
    Prune,
}

impl ObfuscationMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ObfuscationMethod::None => "none",
            ObfuscationMethod::Mask => "mask",
            ObfuscationMethod::Noise => "noise",
            ObfuscationMethod::Clip => "clip",
            ObfuscationMethod::Prune => "prune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ObfuscationMethod::None),
            "mask" => Ok(ObfuscationMethod::Mask),
            "noise" => Ok(ObfuscationMethod::Noise),
            "clip" => Ok(ObfuscationMethod::Clip),
            "prune" => Ok(ObfuscationMethod::Prune),
            other => Err(Error::Config(format!("unknown obfuscation method `{other}`"))),
        }
    }
}

/// Method tag plus hyperparameter: mask ratio, noise sigma, or clip/prune
/// percentile fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObfuscationSpec {
    pub method: ObfuscationMethod,
    pub p: f64,
    pub seed: u64,
    /// Diagnostic switch: ignore the mask-exempt tags and mask every entry,
    /// including normalization statistics. Reproduces the failure mode the
    /// exemption exists to prevent.
    pub mask_all: bool,
}

impl ObfuscationSpec {
    pub fn none() -> Self {
        ObfuscationSpec {
            method: ObfuscationMethod::None,
            p: 0.0,
            seed: 0,
            mask_all: false,
        }
    }

    pub fn mask(p: f64, seed: u64) -> Self {
        ObfuscationSpec {
            method: ObfuscationMethod::Mask,
            p,
            seed,
            mask_all: false,
        }
    }

    pub fn noise(sigma: f64, seed: u64) -> Self {
        ObfuscationSpec {
            method: ObfuscationMethod::Noise,
            p: sigma,
            seed,
            mask_all: false,
        }
    }

    pub fn clip(p: f64) -> Self {
        ObfuscationSpec {
            method: ObfuscationMethod::Clip,
            p,
            seed: 0,
            mask_all: false,
        }
    }

    pub fn prune(p: f64) -> Self {
        ObfuscationSpec {
            method: ObfuscationMethod::Prune,
            p,
            seed: 0,
            mask_all: false,
        }
    }

    pub fn with_naive_masking(mut self) -> Self {
        self.mask_all = true;
        self
    }

    /// Same spec with a derived seed, for per-(round, client) streams.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidHyperparameter(msg));
        match self.method {
            ObfuscationMethod::None => Ok(()),
            ObfuscationMethod::Mask => {
                if !(0.0..1.0).contains(&self.p) {
                    return fail(format!("mask ratio must be in [0,1), got {}", self.p));
                }
                Ok(())
            }
            ObfuscationMethod::Noise => {
                if self.p.is_nan() || self.p < 0.0 {
                    return fail(format!("noise sigma must be >= 0, got {}", self.p));
                }
                Ok(())
            }
            ObfuscationMethod::Clip | ObfuscationMethod::Prune => {
                if !(0.0..1.0).contains(&self.p) {
                    return fail(format!(
                        "{} percentile must be in [0,1), got {}",
                        self.method.name(),
                        self.p
                    ));
                }
                Ok(())
            }
        }
    }

    /// Short identifier for CSV rows and file names, e.g. `mask-0.4`.
    pub fn label(&self) -> String {
        match self.method {
            ObfuscationMethod::None => "none".into(),
            m => format!("{}-{}", m.name(), self.p),
        }
    }
}

/// Replace each maskable scalar with NaN independently with probability `p`.
/// The decision for scalar `i` is a pure function of `(seed, i)`, so results
/// are identical under any parallel schedule.
pub fn mask(bundle: &ParameterBundle, p: f64, seed: u64) -> Result<ParameterBundle> {
    mask_impl(bundle, p, seed, false)
}

/// Masking with the exemption disabled (every entry eligible, including
/// batch-norm statistics). Diagnostic only; see [`ObfuscationSpec::mask_all`].
pub fn mask_naive(bundle: &ParameterBundle, p: f64, seed: u64) -> Result<ParameterBundle> {
    mask_impl(bundle, p, seed, true)
}

fn mask_impl(bundle: &ParameterBundle, p: f64, seed: u64, ignore_tags: bool) -> Result<ParameterBundle> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidHyperparameter(format!(
            "mask ratio must be in [0,1), got {p}"
        )));
    }
    let mut out = bundle.clone();
    let mut index = 0u64;
    for entry in out.entries_mut() {
        let eligible = ignore_tags || entry.tag == ParamTag::Maskable;
        for v in entry.tensor.data_mut() {
            if eligible && rng::unit_uniform(seed, index) < p {
                *v = f64::NAN;
            }
            index += 1;
        }
    }
    Ok(out)
}

/// Add independent Gaussian noise `N(0, sigma^2)` to every parameter,
/// exempt entries included.
pub fn noise(bundle: &ParameterBundle, sigma: f64, seed: u64) -> Result<ParameterBundle> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidHyperparameter(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    let mut out = bundle.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut index = 0u64;
    for entry in out.entries_mut() {
        for v in entry.tensor.data_mut() {
            *v += sigma * rng::standard_normal(seed, index);
            index += 1;
        }
    }
    Ok(out)
}

/// p-th percentile of `|values|` with linear interpolation between closest
/// ranks. `p` in [0,1).
pub fn abs_percentile(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = p * (mags.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 || lo + 1 >= mags.len() {
        mags[lo]
    } else {
        mags[lo] + frac * (mags[lo + 1] - mags[lo])
    }
}

/// Per-entry clip/prune thresholds.
pub fn compute_thresholds(bundle: &ParameterBundle, p: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidHyperparameter(format!(
            "percentile must be in [0,1), got {p}"
        )));
    }
    Ok(bundle
        .entries()
        .iter()
        .map(|e| abs_percentile(e.tensor.data(), p))
        .collect())
}

/// `|v| > t  ->  sign(v) * t`, one threshold per entry.
pub fn clip_with_thresholds(bundle: &ParameterBundle, thresholds: &[f64]) -> ParameterBundle {
    let mut out = bundle.clone();
    for (entry, &t) in out.entries_mut().iter_mut().zip(thresholds) {
        for v in entry.tensor.data_mut() {
            if v.abs() > t {
                *v = v.signum() * t;
            }
        }
    }
    out
}

/// `|v| < t  ->  0`, one threshold per entry.
pub fn prune_with_thresholds(bundle: &ParameterBundle, thresholds: &[f64]) -> ParameterBundle {
    let mut out = bundle.clone();
    for (entry, &t) in out.entries_mut().iter_mut().zip(thresholds) {
        for v in entry.tensor.data_mut() {
            if v.abs() < t {
                *v = 0.0;
            }
        }
    }
    out
}

/// Clamp each entry's magnitudes at that entry's p-th absolute percentile.
pub fn clip(bundle: &ParameterBundle, p: f64) -> Result<ParameterBundle> {
    Ok(clip_with_thresholds(bundle, &compute_thresholds(bundle, p)?))
}

/// Zero each entry's magnitudes below that entry's p-th absolute percentile.
pub fn prune(bundle: &ParameterBundle, p: f64) -> Result<ParameterBundle> {
    Ok(prune_with_thresholds(bundle, &compute_thresholds(bundle, p)?))
}

/// Dispatch on the method tag; `method = none` is the identity.
pub fn obfuscate(bundle: &ParameterBundle, spec: &ObfuscationSpec) -> Result<ParameterBundle> {
    spec.validate()?;
    match spec.method {
        ObfuscationMethod::None => Ok(bundle.clone()),
        ObfuscationMethod::Mask => {
            if spec.mask_all {
                mask_naive(bundle, spec.p, spec.seed)
            } else {
                mask(bundle, spec.p, spec.seed)
            }
        }
        ObfuscationMethod::Noise => noise(bundle, spec.p, spec.seed),
        ObfuscationMethod::Clip => clip(bundle, spec.p),
        ObfuscationMethod::Prune => prune(bundle, spec.p),
    }
}
