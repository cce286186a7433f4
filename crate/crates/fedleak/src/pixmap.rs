//! Binary portable pixmap output (PGM for 1-channel, PPM for 3-channel).
//!
//! Model-space values are quantized as `round(clamp(v, 0, 1) * 255)`, which
//! makes file contents bit-exact functions of the tensor.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::PixelImage;
use crate::tensor::Tensor;

/// Quantize a `[c,h,w]` model-space image for file output.
pub fn quantize_clamped(image: &Tensor) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn interleave(channels: usize, hw: usize, planar: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(planar.len());
    for px in 0..hw {
        for c in 0..channels {
            out.push(planar[c * hw + px]);
        }
    }
    out
}

fn write_pixmap(path: &Path, channels: usize, h: usize, w: usize, planar: &[u8]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        n => {
            return Err(Error::InvalidHyperparameter(format!(
                "pixmap output supports 1 or 3 channels, got {n}"
            )))
        }
    };
    let mut file = std::fs::File::create(path)?;
    write!(file, "{magic}\n{w} {h}\n255\n")?;
    file.write_all(&interleave(channels, h * w, planar))?;
    Ok(())
}

/// Write a model-space `[c,h,w]` tensor as a PGM/PPM file.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "pixmap".into(),
            expected: vec![0, 0, 0],
            got: s.to_vec(),
        });
    }
    write_pixmap(path, s[0], s[1], s[2], &quantize_clamped(image))
}

/// Write an already-quantized pixel image (e.g. a brightness-adjusted
/// reconstruction) as a PGM/PPM file.
pub fn write_pixel_image(path: &Path, image: &PixelImage) -> Result<()> {
    write_pixmap(
        path,
        image.channels,
        image.height,
        image.width,
        &image.to_bytes(),
    )
}
