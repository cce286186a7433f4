//! Leakage metrics: pixel MSE, SSIM, and the brightness-sweep score.
//!
//! Reconstructions tend to come out globally darkened, with some pixels
//! wrapping around the 0-255 range; a leak that looks obfuscated can become
//! legible after adding a constant brightness offset. The sweep therefore
//! scores a reconstruction by the maximum SSIM over offsets 0, 10, ..., 200
//! applied modulo 256 (clamping available as a sensitivity switch).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An integer-valued image in pixel space (each value in 0..=255), stored
/// channel-major like model tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PixelImage {
    pub fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                context: "pixel image".into(),
                expected: vec![channels, height, width],
                got: vec![data.len()],
            });
        }
        Ok(PixelImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn same_shape(&self, other: &PixelImage) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    /// Clamped u8 view, for file output.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| v.clamp(0.0, 255.0).round() as u8)
            .collect()
    }
}

/// Quantize a model-space `[c,h,w]` image (nominally in `[0,1]`) to pixel
/// space via `round(v * 255)`, wrapping modulo 256. Out-of-range attack
/// outputs wrap exactly the way a u8 render does.
pub fn quantize(image: &Tensor) -> Result<PixelImage> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "quantize".into(),
            expected: vec![0, 0, 0],
            got: s.to_vec(),
        });
    }
    let data = image
        .data()
        .iter()
        .map(|&v| ((v * 255.0).round() as i64).rem_euclid(256) as f64)
        .collect();
    PixelImage::from_raw(s[0], s[1], s[2], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrightnessMode {
    /// `(v + offset) mod 256` — matches the wrap-around behavior of u8
    /// renders and lets an offset exactly undo a global shift.
    Wrap,
    /// `min(v + offset, 255)` — saturating variant for sensitivity checks.
    Clamp,
}

/// Canonical SSIM parameters: 11x11 Gaussian window with sigma 1.5,
/// stability constants from k1/k2 and the dynamic range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian window (the 2-D window is its outer product,
    /// so it sums to 1).
    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let mut k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = k.iter().sum();
        for v in &mut k {
            *v /= sum;
        }
        k
    }
}

/// Separable valid-mode filtering with a normalized 1-D kernel.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let kw = kernel.len();
    let ow = w - kw + 1;
    let oh = h - kw + 1;
    // rows
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    // cols
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> f64 {
    let kernel = cfg.kernel();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &kernel);
    let mu_b = filter_valid(b, h, w, &kernel);
    let e_aa = filter_valid(&aa, h, w, &kernel);
    let e_bb = filter_valid(&bb, h, w, &kernel);
    let e_ab = filter_valid(&ab, h, w, &kernel);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity between two pixel-space images, averaged over
/// channels. Symmetric in its arguments.
pub fn ssim(a: &PixelImage, b: &PixelImage, cfg: &SsimConfig) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            context: "ssim".into(),
            expected: vec![a.channels, a.height, a.width],
            got: vec![b.channels, b.height, b.width],
        });
    }
    if a.channels != 1 && a.channels != 3 {
        return Err(Error::InvalidHyperparameter(format!(
            "ssim expects 1 or 3 channels, got {}",
            a.channels
        )));
    }
    if a.height < cfg.window || a.width < cfg.window {
        return Err(Error::InvalidHyperparameter(format!(
            "image {}x{} smaller than the {}x{} ssim window",
            a.height, a.width, cfg.window, cfg.window
        )));
    }
    let mut total = 0.0;
    for c in 0..a.channels {
        total += ssim_plane(a.plane(c), b.plane(c), a.height, a.width, cfg);
    }
    Ok(total / a.channels as f64)
}

/// Mean squared pixel error (0-255 scale).
pub fn mse(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            context: "mse".into(),
            expected: vec![a.channels, a.height, a.width],
            got: vec![b.channels, b.height, b.width],
        });
    }
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// The offsets swept: 0 plus the twenty steps 10, 20, ..., 200. Offset 0 is
/// included so an unshifted perfect leak is never scored below a shifted one.
pub const SWEEP_OFFSETS: [u32; 21] = [
    0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 170, 180, 190, 200,
];

/// Per-offset SSIM of a reconstruction against the original, plus the raw
/// pixel MSE and the best (offset, score) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    pub mse: f64,
    pub ssim_per_offset: Vec<(u32, f64)>,
    pub max_adjusted_ssim: f64,
    pub argmax_offset: u32,
}

fn shift(image: &PixelImage, offset: u32, mode: BrightnessMode) -> PixelImage {
    let data = image
        .data
        .iter()
        .map(|&v| match mode {
            BrightnessMode::Wrap => ((v as i64 + offset as i64).rem_euclid(256)) as f64,
            BrightnessMode::Clamp => (v + offset as f64).min(255.0),
        })
        .collect();
    PixelImage {
        channels: image.channels,
        height: image.height,
        width: image.width,
        data,
    }
}

/// Score a leaked image against the original across all brightness offsets.
pub fn brightness_sweep(
    leaked: &PixelImage,
    original: &PixelImage,
    cfg: &SsimConfig,
    mode: BrightnessMode,
) -> Result<LeakageReport> {
    let raw_mse = mse(leaked, original)?;
    let mut per_offset = Vec::with_capacity(SWEEP_OFFSETS.len());
    let mut best = (0u32, f64::NEG_INFINITY);
    for &offset in SWEEP_OFFSETS.iter() {
        let adjusted = shift(leaked, offset, mode);
        let score = ssim(&adjusted, original, cfg)?;
        if score > best.1 {
            best = (offset, score);
        }
        per_offset.push((offset, score));
    }
    Ok(LeakageReport {
        mse: raw_mse,
        ssim_per_offset: per_offset,
        max_adjusted_ssim: best.1,
        argmax_offset: best.0,
    })
}

/// The best-offset-adjusted image itself (for file emission).
pub fn adjusted_image(leaked: &PixelImage, offset: u32, mode: BrightnessMode) -> PixelImage {
    shift(leaked, offset, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn structured(h: usize, w: usize, seed: u64) -> PixelImage {
        // sinusoidal grating plus a bright blob; deterministic
        let phase = rng::unit_uniform(seed, 0) * std::f64::consts::TAU;
        let (cy, cx) = (
            h as f64 * (0.3 + 0.4 * rng::unit_uniform(seed, 1)),
            w as f64 * (0.3 + 0.4 * rng::unit_uniform(seed, 2)),
        );
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let s = 0.5 + 0.3 * ((x as f64 * 0.7 + y as f64 * 0.3) + phase).sin();
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / 18.0;
                let blob = 0.45 * (-d2).exp();
                data[y * w + x] = ((s + blob).clamp(0.0, 1.0) * 255.0).round();
            }
        }
        PixelImage::from_raw(1, h, w, data).unwrap()
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> PixelImage {
        let data = (0..h * w)
            .map(|i| (rng::unit_uniform(seed, i as u64) * 255.0).round())
            .collect();
        PixelImage::from_raw(1, h, w, data).unwrap()
    }

    /// Direct-formula reference SSIM: explicit 2-D window, one window pair at
    /// a time. Independent of the separable-filter implementation path.
    fn reference_ssim(a: &PixelImage, b: &PixelImage, cfg: &SsimConfig) -> f64 {
        let k1d = cfg.kernel();
        let n = cfg.window;
        let mut w2d = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                w2d[y * n + x] = k1d[y] * k1d[x];
            }
        }
        let (c1, c2) = (cfg.c1(), cfg.c2());
        let mut total = 0.0;
        for c in 0..a.channels {
            let (pa, pb) = (a.plane(c), b.plane(c));
            let (oh, ow) = (a.height - n + 1, a.width - n + 1);
            let mut plane_total = 0.0;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut ma, mut mb, mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for wy in 0..n {
                        for wx in 0..n {
                            let wv = w2d[wy * n + wx];
                            let av = pa[(oy + wy) * a.width + ox + wx];
                            let bv = pb[(oy + wy) * a.width + ox + wx];
                            ma += wv * av;
                            mb += wv * bv;
                            eaa += wv * av * av;
                            ebb += wv * bv * bv;
                            eab += wv * av * bv;
                        }
                    }
                    let va = eaa - ma * ma;
                    let vb = ebb - mb * mb;
                    let cov = eab - ma * mb;
                    plane_total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            total += plane_total / (oh * ow) as f64;
        }
        total / a.channels as f64
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one() {
        let img = structured(20, 20, 1);
        let cfg = SsimConfig::default();
        assert_eq!(ssim(&img, &img, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn inverted_image_scores_below_one() {
        let img = structured(20, 20, 2);
        let inv = PixelImage::from_raw(
            1,
            20,
            20,
            img.data.iter().map(|v| 255.0 - v).collect(),
        )
        .unwrap();
        let s = ssim(&img, &inv, &SsimConfig::default()).unwrap();
        assert!(s < 1.0, "{s}");
    }

    #[test]
    fn agrees_with_direct_formula_reference() {
        let cfg = SsimConfig::default();
        for seed in 0..20u64 {
            let (a, b) = if seed % 2 == 0 {
                (structured(16, 18, seed), noise_image(16, 18, seed + 100))
            } else {
                (noise_image(14, 14, seed), structured(14, 14, seed + 200))
            };
            let fast = ssim(&a, &b, &cfg).unwrap();
            let slow = reference_ssim(&a, &b, &cfg);
            assert!((fast - slow).abs() < 1e-6, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_is_exactly_symmetric() {
        let a = structured(15, 15, 5);
        let b = noise_image(15, 15, 6);
        let cfg = SsimConfig::default();
        assert_eq!(
            ssim(&a, &b, &cfg).unwrap().to_bits(),
            ssim(&b, &a, &cfg).unwrap().to_bits()
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = structured(15, 15, 1);
        let b = structured(16, 16, 1);
        assert!(ssim(&a, &b, &SsimConfig::default()).is_err());
    }

    #[test]
    fn identical_images_peak_at_offset_zero() {
        let img = structured(20, 20, 7);
        let report =
            brightness_sweep(&img, &img, &SsimConfig::default(), BrightnessMode::Wrap).unwrap();
        assert_eq!(report.argmax_offset, 0);
        assert_eq!(report.max_adjusted_ssim, 1.0);
        assert_eq!(report.ssim_per_offset.len(), 21);
        assert_eq!(report.mse, 0.0);
    }

    #[test]
    fn modular_shift_is_exactly_compensated() {
        let original = structured(20, 20, 8);
        let leaked = PixelImage::from_raw(
            1,
            20,
            20,
            original
                .data
                .iter()
                .map(|&v| (v as i64 - 50).rem_euclid(256) as f64)
                .collect(),
        )
        .unwrap();
        let report =
            brightness_sweep(&leaked, &original, &SsimConfig::default(), BrightnessMode::Wrap)
                .unwrap();
        assert_eq!(report.argmax_offset, 50);
        assert_eq!(report.max_adjusted_ssim, 1.0);
    }

    #[test]
    fn white_noise_scores_low_against_structure() {
        let cfg = SsimConfig::default();
        for seed in 0..10u64 {
            let original = structured(28, 28, 40 + seed);
            let noise = noise_image(28, 28, 80 + seed);
            let report =
                brightness_sweep(&noise, &original, &cfg, BrightnessMode::Wrap).unwrap();
            assert!(
                report.max_adjusted_ssim < 0.2,
                "seed {seed}: {}",
                report.max_adjusted_ssim
            );
        }
    }

    #[test]
    fn sweep_dominates_raw_ssim() {
        let cfg = SsimConfig::default();
        let a = structured(20, 20, 9);
        let mut dark = a.clone();
        for v in &mut dark.data {
            *v = (*v as i64 - 70).rem_euclid(256) as f64;
        }
        let raw = ssim(&dark, &a, &cfg).unwrap();
        let report = brightness_sweep(&dark, &a, &cfg, BrightnessMode::Wrap).unwrap();
        assert!(report.max_adjusted_ssim >= raw);
    }

    #[test]
    fn sweep_absorbs_a_ten_step_darkening() {
        // darkening the leak by one sweep step moves the compensating offset
        // up by 10; as long as the original argmax was <= 190 the new best
        // offset is still inside the sweep and the maximum is unchanged
        let cfg = SsimConfig::default();
        let original = structured(20, 20, 10);
        let mut leaked = noise_image(20, 20, 11);
        for (l, o) in leaked.data.iter_mut().zip(&original.data) {
            // partially structured leak, globally darkened by 60
            *l = (((*l + 2.0 * o) / 3.0).round() as i64 - 60).rem_euclid(256) as f64;
        }
        let base = brightness_sweep(&leaked, &original, &cfg, BrightnessMode::Wrap).unwrap();
        assert!(base.argmax_offset > 0 && base.argmax_offset <= 190);
        let darker = PixelImage::from_raw(
            1,
            20,
            20,
            leaked
                .data
                .iter()
                .map(|&v| (v as i64 - 10).rem_euclid(256) as f64)
                .collect(),
        )
        .unwrap();
        let again = brightness_sweep(&darker, &original, &cfg, BrightnessMode::Wrap).unwrap();
        assert_eq!(again.argmax_offset, base.argmax_offset + 10);
        assert!((again.max_adjusted_ssim - base.max_adjusted_ssim).abs() < 1e-12);
    }

    #[test]
    fn clamp_mode_saturates() {
        let img = PixelImage::from_raw(1, 1, 1, vec![250.0]).unwrap();
        let wrapped = shift(&img, 10, BrightnessMode::Wrap);
        let clamped = shift(&img, 10, BrightnessMode::Clamp);
        assert_eq!(wrapped.data[0], 4.0);
        assert_eq!(clamped.data[0], 255.0);
    }

    #[test]
    fn quantize_wraps_out_of_range_model_values() {
        let t = Tensor::from_vec(&[1, 1, 2], vec![-0.1, 1.1]).unwrap();
        let q = quantize(&t).unwrap();
        // round(-0.1*255) = -26 (ties away from zero), mod 256 = 230
        // round(1.1*255) = 281, mod 256 = 25
        assert_eq!(q.data, vec![230.0, 25.0]);
    }
}
