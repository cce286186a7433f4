//! Full gradient-inversion run against one intercepted gradient: analytic
//! label extraction, gradient-matching reconstruction, brightness-sweep
//! scoring, pixmap output. Then the same capture under masking.
//!
//! Run with: cargo run --release --example gradient_inversion

use fedleak::attack::{capture_gradient, infer_label, run_attack, AttackConfig};
use fedleak::data::synth_digits;
use fedleak::metrics::{adjusted_image, brightness_sweep, quantize, BrightnessMode, SsimConfig};
use fedleak::nn::{init_params, ModelConfig};
use fedleak::obfuscate::ObfuscationSpec;
use fedleak::pixmap;

fn main() -> fedleak::Result<()> {
    let out_dir = std::env::temp_dir().join("fedleak_inversion");
    std::fs::create_dir_all(&out_dir)?;

    let data = synth_digits(100, 9)?;
    let (image, label) = (&data.images[42], data.labels[42]);
    let model = ModelConfig::default_cnn((1, 28, 28), 10, 5);
    let params = init_params(&model)?;

    // the eavesdropper's view: one per-sample gradient
    let capture = capture_gradient(&model, &params, image, label, &ObfuscationSpec::none())?;
    println!("true label {label}; analytic inference says {:?}", infer_label(&capture)?);

    let cfg = AttackConfig {
        seed: 1,
        checkpoint_interval: 100,
        init: fedleak::attack::DummyInit::UniformTo(0.3),
        ..AttackConfig::default()
    };
    let result = run_attack(&model, &capture, &cfg)?;
    let report = brightness_sweep(
        &quantize(&result.reconstruction)?,
        &quantize(image)?,
        &SsimConfig::default(),
        BrightnessMode::Wrap,
    )?;
    println!(
        "unobfuscated: {} iterations ({:?}), matching loss {:.3e}, max-ssim {:.3} at offset {}",
        result.iterations, result.stop, result.best_loss, report.max_adjusted_ssim,
        report.argmax_offset
    );

    pixmap::write_image(&out_dir.join("original.pgm"), image)?;
    pixmap::write_image(&out_dir.join("reconstruction.pgm"), &result.reconstruction)?;
    pixmap::write_pixel_image(
        &out_dir.join("adjusted.pgm"),
        &adjusted_image(
            &quantize(&result.reconstruction)?,
            report.argmax_offset,
            BrightnessMode::Wrap,
        ),
    )?;
    println!("wrote pixmaps to {}", out_dir.display());

    // same sample, masked gradient
    let masked = capture_gradient(&model, &params, image, label, &ObfuscationSpec::mask(0.4, 7))?;
    let masked_result = run_attack(&model, &masked, &cfg)?;
    let masked_report = brightness_sweep(
        &quantize(&masked_result.reconstruction)?,
        &quantize(image)?,
        &SsimConfig::default(),
        BrightnessMode::Wrap,
    )?;
    println!(
        "mask p=0.4:   {} iterations ({:?}), matching loss {:.3e}, max-ssim {:.3}",
        masked_result.iterations,
        masked_result.stop,
        masked_result.best_loss,
        masked_report.max_adjusted_ssim
    );
    Ok(())
}
