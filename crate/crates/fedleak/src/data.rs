//! Dataset ingestion and synthesis.
//!
//! Real datasets load from their standard binary formats (MNIST IDX,
//! CIFAR-10 batches). For fully offline runs two synthetic generators are
//! provided: class-conditioned oriented gratings with a positioned blob
//! (`synth_dataset`) and rendered digit glyphs (`synth_digits`), both
//! deterministic per seed and learnable by the small CNN.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Images in `[0,1]` with class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    /// Each image is `[c, h, w]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, classes: usize, images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::DatasetTooSmall(format!(
                "{} images vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: *l,
                classes,
            });
        }
        Ok(Dataset {
            name: name.into(),
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(c, h, w)` of the first image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1], s[2])
    }

    pub fn subset(&self, idxs: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            classes: self.classes,
            images: idxs.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idxs.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` samples (desk-scale truncation).
    pub fn take(&self, n: usize) -> Dataset {
        let idxs: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idxs)
    }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::DatasetFormat {
        path: path.display().to_string(),
        reason: format!("truncated header: {e}"),
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Parse big-endian IDX image/label files (magic 2051 / 2049) into a
/// dataset of `[1, rows, cols]` images scaled by 1/255.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir, images_path)?;
    if magic != 2051 {
        return Err(Error::DatasetFormat {
            path: images_path.display().to_string(),
            reason: format!("bad image magic {magic}, expected 2051"),
        });
    }
    let count = read_u32_be(&mut ir, images_path)? as usize;
    let rows = read_u32_be(&mut ir, images_path)? as usize;
    let cols = read_u32_be(&mut ir, images_path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    ir.read_exact(&mut pixels).map_err(|e| Error::DatasetFormat {
        path: images_path.display().to_string(),
        reason: format!("truncated pixel data: {e}"),
    })?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lr, labels_path)?;
    if magic != 2049 {
        return Err(Error::DatasetFormat {
            path: labels_path.display().to_string(),
            reason: format!("bad label magic {magic}, expected 2049"),
        });
    }
    let lcount = read_u32_be(&mut lr, labels_path)? as usize;
    if lcount != count {
        return Err(Error::DatasetFormat {
            path: labels_path.display().to_string(),
            reason: format!("{lcount} labels for {count} images"),
        });
    }
    let mut labels_raw = vec![0u8; lcount];
    lr.read_exact(&mut labels_raw).map_err(|e| Error::DatasetFormat {
        path: labels_path.display().to_string(),
        reason: format!("truncated label data: {e}"),
    })?;

    let per = rows * cols;
    let images = pixels
        .chunks_exact(per)
        .map(|chunk| {
            Tensor::from_vec(
                &[1, rows, cols],
                chunk.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    Dataset::new("mnist", 10, images, labels)
}

const CIFAR_RECORD: usize = 3073; // label byte + 3 * 32 * 32

/// Parse CIFAR-10 binary batches (3073-byte records, channel-major R,G,B
/// planes) into `[3, 32, 32]` images scaled by 1/255.
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::DatasetTooSmall("no CIFAR-10 batch files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::DatasetFormat {
                path: path.display().to_string(),
                reason: format!(
                    "file size {} is not a positive multiple of {CIFAR_RECORD}",
                    bytes.len()
                ),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label > 9 {
                return Err(Error::DatasetFormat {
                    path: path.display().to_string(),
                    reason: format!("label byte {label} out of range"),
                });
            }
            labels.push(label);
            images.push(Tensor::from_vec(
                &[3, 32, 32],
                record[1..].iter().map(|&b| b as f64 / 255.0).collect(),
            )?);
        }
    }
    Dataset::new("cifar10", 10, images, labels)
}

/// Corner-aligned bilinear resize of a `[c,h,w]` image.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "resize_bilinear".into(),
            expected: vec![0, 0, 0],
            got: s.to_vec(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidHyperparameter("resize target must be >= 1x1".into()));
    }
    let scale = |out: usize, inp: usize| -> f64 {
        if out > 1 {
            (inp - 1) as f64 / (out - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(out_h, h), scale(out_w, w));
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = oy as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ox as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                let v = plane[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                    + plane[y0 * w + x1] * (1.0 - dy) * dx
                    + plane[y1 * w + x0] * dy * (1.0 - dx)
                    + plane[y1 * w + x1] * dy * dx;
                data.push(v);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], data)
}

/// Class-conditioned structured images: a thick bright bar through the
/// center at a class-dependent angle plus a bright disc whose position
/// rotates with the class, over a dark background. High-contrast shapes
/// like these are easy for a small CNN to separate and give the leakage
/// metric crisp structure to latch onto.
pub fn synth_dataset(
    n: usize,
    classes: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidHyperparameter(format!(
            "synth dataset needs >= 2 classes, got {classes}"
        )));
    }
    if n < classes {
        return Err(Error::DatasetTooSmall(format!(
            "{n} samples for {classes} classes"
        )));
    }
    let (c, h, w) = shape;
    let scale = h.min(w) as f64;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let s = rng::derive(seed, &[0x5e3d, i as u64]);
        let theta = std::f64::consts::PI * (label as f64 + 0.3 * rng::unit_uniform(s, 0))
            / classes as f64;
        let (dir_y, dir_x) = (theta.sin(), theta.cos());
        let half_width = scale * 0.10 * (1.0 + 0.3 * rng::unit_uniform(s, 1));
        let bar_gain = 0.75 + 0.25 * rng::unit_uniform(s, 2);
        // disc on the axis perpendicular to the bar, side set by the class
        let side = if label.is_multiple_of(2) { 1.0 } else { -1.0 };
        let (cy, cx) = (h as f64 * 0.5 - 0.5, w as f64 * 0.5 - 0.5);
        let disc_d = scale * (0.26 + 0.06 * rng::unit_uniform(s, 3));
        let (dy, dx) = (
            cy - side * dir_x * disc_d,
            cx + side * dir_y * disc_d,
        );
        let disc_r = scale * 0.12;
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let gain = 1.0 - 0.15 * ch as f64;
            for y in 0..h {
                for x in 0..w {
                    // distance from the bar's center line
                    let d_bar = ((y as f64 - cy) * dir_x - (x as f64 - cx) * dir_y).abs();
                    let bar = bar_gain / (1.0 + ((d_bar - half_width) * 2.0).exp());
                    let d_disc =
                        (((y as f64 - dy).powi(2) + (x as f64 - dx).powi(2)).sqrt() - disc_r)
                            * 2.0;
                    let disc = 0.9 / (1.0 + d_disc.exp());
                    let noise =
                        0.02 * rng::unit_uniform(s, (4 + ch * h * w + y * w + x) as u64);
                    let v = 0.08 + (bar + disc) * gain + noise;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        images.push(Tensor::from_vec(&[c, h, w], data)?);
        labels.push(label);
    }
    Dataset::new("synth", classes, images, labels)
}

// 5x7 bitmaps for the ten digits, one row byte per scanline.
const DIGIT_FONT: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

/// Rendered digit glyphs as `[1, 28, 28]` images: a ten-class, MNIST-shaped
/// stand-in for offline runs. Glyphs are upscaled with bilinear smoothing
/// and jittered in position and intensity.
pub fn synth_digits(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::DatasetTooSmall("0 samples requested".into()));
    }
    let (h, w) = (28usize, 28usize);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        let s = rng::derive(seed, &[0xd161, i as u64]);
        // render the 5x7 glyph onto a coarse grid, then upscale
        let mut glyph = Tensor::zeros(&[1, 7, 5]);
        let intensity = 0.75 + 0.25 * rng::unit_uniform(s, 0);
        for (row, bits) in DIGIT_FONT[label].iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) != 0 {
                    glyph.data_mut()[row * 5 + col] = intensity;
                }
            }
        }
        let scaled = resize_bilinear(&glyph, 21, 15)?;
        let dy = 3 + (rng::unit_uniform(s, 1) * 5.0) as usize; // 3..=7
        let dx = 6 + (rng::unit_uniform(s, 2) * 5.0) as usize; // 6..=10
        let mut data = vec![0.0; h * w];
        for y in 0..21 {
            for x in 0..15 {
                data[(y + dy) * w + (x + dx)] = scaled.data()[y * 15 + x];
            }
        }
        for (j, v) in data.iter_mut().enumerate() {
            *v = (*v + 0.03 * rng::unit_uniform(s, 100 + j as u64)).clamp(0.0, 1.0);
        }
        images.push(Tensor::from_vec(&[1, h, w], data)?);
        labels.push(label);
    }
    Dataset::new("digits", 10, images, labels)
}
