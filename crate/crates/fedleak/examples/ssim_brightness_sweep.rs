//! The brightness-sweep leakage score: reconstructions come out darkened
//! with wrap-around pixels, so raw SSIM understates leakage; sweeping
//! additive offsets recovers the real similarity.
//!
//! Run with: cargo run --release --example ssim_brightness_sweep

use fedleak::data::synth_digits;
use fedleak::metrics::{brightness_sweep, quantize, ssim, BrightnessMode, PixelImage, SsimConfig};

fn main() -> fedleak::Result<()> {
    let data = synth_digits(10, 4)?;
    let original = quantize(&data.images[3])?;
    let cfg = SsimConfig::default();

    // simulate a darkened leak: subtract 60 gray levels modulo 256
    let leaked = PixelImage::from_raw(
        1,
        original.height,
        original.width,
        original
            .data
            .iter()
            .map(|&v| (v as i64 - 60).rem_euclid(256) as f64)
            .collect(),
    )?;

    let raw = ssim(&leaked, &original, &cfg)?;
    let report = brightness_sweep(&leaked, &original, &cfg, BrightnessMode::Wrap)?;
    println!("raw ssim of the darkened leak: {raw:.4}");
    println!(
        "sweep: max {:.4} at offset {} (exact compensation)",
        report.max_adjusted_ssim, report.argmax_offset
    );
    println!("\noffset  ssim");
    for (offset, score) in &report.ssim_per_offset {
        let bar = "#".repeat(((score.max(0.0)) * 40.0) as usize);
        println!("  {offset:>3}  {score:>7.4}  {bar}");
    }

    // clamp mode cannot undo a wrap-around
    let clamped = brightness_sweep(&leaked, &original, &cfg, BrightnessMode::Clamp)?;
    println!(
        "\nclamp-mode max: {:.4} (saturating addition loses wrapped pixels)",
        clamped.max_adjusted_ssim
    );
    Ok(())
}
