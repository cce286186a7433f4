//! Named, shaped, layer-tagged flat views of model parameters.
//!
//! Aggregation relies on positional alignment: all bundles produced from one
//! model configuration list the same entries in the same order, so zipping
//! by position equals zipping by name.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether the masking transform may touch a parameter. Normalization-layer
/// parameters are exempt: a NaN inside batch-norm statistics corrupts every
/// activation that flows through the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamTag {
    Maskable,
    MaskExempt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleEntry {
    pub name: String,
    pub tensor: Tensor,
    pub tag: ParamTag,
}

impl BundleEntry {
    /// Running statistics are carried in the bundle but not updated by
    /// gradient descent; everything else is trainable.
    pub fn trainable(&self) -> bool {
        !self.name.ends_with(".running_mean") && !self.name.ends_with(".running_var")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterBundle {
    entries: Vec<BundleEntry>,
}

const MAGIC: &[u8; 4] = b"FLPB";
const VERSION: u16 = 1;

impl ParameterBundle {
    pub fn new(entries: Vec<BundleEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::BundleMismatch(format!(
                    "duplicate entry name `{}`",
                    e.name
                )));
            }
        }
        Ok(ParameterBundle { entries })
    }

    pub fn entries(&self) -> &[BundleEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [BundleEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    /// Total scalar count across all entries.
    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Fraction of scalars exempt from masking.
    pub fn mask_exempt_fraction(&self) -> f64 {
        let exempt: usize = self
            .entries
            .iter()
            .filter(|e| e.tag == ParamTag::MaskExempt)
            .map(|e| e.tensor.len())
            .sum();
        exempt as f64 / self.total_count().max(1) as f64
    }

    pub fn has_nan(&self) -> bool {
        self.entries.iter().any(|e| e.tensor.has_nan())
    }

    pub fn is_dense(&self) -> bool {
        !self.has_nan()
    }

    /// Same names, shapes and tags in the same order.
    pub fn aligned_with(&self, other: &ParameterBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.tensor.shape() == b.tensor.shape() && a.tag == b.tag
            })
    }

    pub fn check_aligned(&self, other: &ParameterBundle) -> Result<()> {
        if self.aligned_with(other) {
            Ok(())
        } else {
            Err(Error::BundleMismatch(
                "bundles disagree on entry names, shapes or tags".into(),
            ))
        }
    }

    /// Concatenate all entries into one flat vector (entry order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_count());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    /// Rebuild a bundle with this bundle's layout from a flat vector.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParameterBundle> {
        if flat.len() != self.total_count() {
            return Err(Error::BundleMismatch(format!(
                "flat vector has {} scalars, layout needs {}",
                flat.len(),
                self.total_count()
            )));
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            let n = e.tensor.len();
            entries.push(BundleEntry {
                name: e.name.clone(),
                tensor: Tensor::from_vec(e.tensor.shape(), flat[offset..offset + n].to_vec())?,
                tag: e.tag,
            });
            offset += n;
        }
        ParameterBundle::new(entries)
    }

    /// Bundle with identical layout and all values zero.
    pub fn zeros_like(&self) -> ParameterBundle {
        ParameterBundle {
            entries: self
                .entries
                .iter()
                .map(|e| BundleEntry {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape()),
                    tag: e.tag,
                })
                .collect(),
        }
    }

    /// Feed map for graph evaluation (entry name -> tensor).
    pub fn to_feeds(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }

    /// Flat binary serialization: `FLPB`, version, entry count, then per
    /// entry name, tag byte, rank, extents and little-endian f64 data. NaN
    /// payloads travel verbatim.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::BundleFormat(format!("name `{}` too long", e.name)));
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[match e.tag {
                ParamTag::Maskable => 0u8,
                ParamTag::MaskExempt => 1u8,
            }])?;
            let shape = e.tensor.shape();
            w.write_all(&[shape.len() as u8])?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ParameterBundle> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BundleFormat(format!("bad magic {magic:?}")));
        }
        let mut v2 = [0u8; 2];
        r.read_exact(&mut v2)?;
        let version = u16::from_le_bytes(v2);
        if version != VERSION {
            return Err(Error::BundleFormat(format!("unsupported version {version}")));
        }
        let mut c4 = [0u8; 4];
        r.read_exact(&mut c4)?;
        let count = u32::from_le_bytes(c4) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut v2)?;
            let name_len = u16::from_le_bytes(v2) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::BundleFormat(format!("bad entry name: {e}")))?;
            let mut tag_rank = [0u8; 2];
            r.read_exact(&mut tag_rank)?;
            let tag = match tag_rank[0] {
                0 => ParamTag::Maskable,
                1 => ParamTag::MaskExempt,
                t => return Err(Error::BundleFormat(format!("unknown tag byte {t}"))),
            };
            let rank = tag_rank[1] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut c4)?;
                shape.push(u32::from_le_bytes(c4) as usize);
            }
            let n = crate::tensor::numel(&shape);
            let mut data = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            entries.push(BundleEntry {
                name,
                tensor: Tensor::from_vec(&shape, data)?,
                tag,
            });
        }
        ParameterBundle::new(entries)
    }
}
