//! The four client-side obfuscation transforms applied to one trained
//! bundle: what each does to the value distribution, and what masking's
//! normalization-layer exemption protects.
//!
//! Run with: cargo run --release --example obfuscation_transforms

use fedleak::nn::{init_params, ModelConfig, ParamTag};
use fedleak::obfuscate::{obfuscate, ObfuscationSpec};

fn main() -> fedleak::Result<()> {
    let config = ModelConfig::default_cnn((1, 28, 28), 10, 3);
    let bundle = init_params(&config)?;
    let n = bundle.total_count();
    println!("bundle: {n} scalars, {:.2}% mask-exempt\n", bundle.mask_exempt_fraction() * 100.0);

    for spec in [
        ObfuscationSpec::none(),
        ObfuscationSpec::mask(0.4, 11),
        ObfuscationSpec::noise(0.5, 12),
        ObfuscationSpec::clip(0.995),
        ObfuscationSpec::prune(0.95),
    ] {
        let out = obfuscate(&bundle, &spec)?;
        let flat = out.flatten();
        let nans = flat.iter().filter(|v| v.is_nan()).count();
        let zeros = flat.iter().filter(|&&v| v == 0.0).count();
        let max_abs = flat.iter().filter(|v| !v.is_nan()).fold(0.0f64, |m, v| m.max(v.abs()));
        let delta: f64 = flat
            .iter()
            .zip(bundle.flatten().iter())
            .filter(|(a, _)| !a.is_nan())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64;
        println!(
            "{:<12} nan {:>5.1}%   zero {:>5.1}%   max|v| {:<8.4} mean|delta| {:.5}",
            spec.label(),
            100.0 * nans as f64 / n as f64,
            100.0 * zeros as f64 / n as f64,
            max_abs,
            delta
        );
    }

    // the exemption in action: batch-norm entries never receive NaN
    let masked = obfuscate(&bundle, &ObfuscationSpec::mask(0.9, 13))?;
    println!("\nper-entry NaN fraction at mask ratio 0.9:");
    for e in masked.entries() {
        let nans = e.tensor.data().iter().filter(|v| v.is_nan()).count();
        println!(
            "  {:<22} {:>6.1}%  ({:?})",
            e.name,
            100.0 * nans as f64 / e.tensor.len() as f64,
            e.tag
        );
    }
    let exempt_hit = masked
        .entries()
        .iter()
        .filter(|e| e.tag == ParamTag::MaskExempt)
        .any(|e| e.tensor.has_nan());
    println!("\nexempt entries touched: {exempt_hit}");
    Ok(())
}
