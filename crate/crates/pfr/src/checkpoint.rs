//! Binary parameter checkpoints.
//!
//! ```text
//! "PFRC"  u32 version (1)  u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim],
//!             f32 values[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. Segmentation parameters carry
//! the prefix `seg.`, discriminator parameters `disc.`. Architecture
//! widths are recovered from the stored shapes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use pfr_core::models::{Discriminator, DiscriminatorConfig, ModelError, SegNet, SegNetConfig};
use pfr_core::Tensor;

pub const MAGIC: &[u8; 4] = b"PFRC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint does not match the architecture: {0}")]
    Model(#[from] ModelError),
}

fn format_err(detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(detail.into())
}

/// Serializes named tensors in the given order.
pub fn encode(tensors: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err("bad magic, not a PFRC checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| format_err(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let ndim = r.take(1, "ndim")?[0] as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| format_err(format!("{name}: shape overflows")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| format_err("size overflow"))?, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format_err(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Both networks of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seg: SegNet<f32>,
    pub disc: Discriminator<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (n, t) in self.seg.named_params() {
            named.push((format!("seg.{n}"), t));
        }
        for (n, t) in self.disc.named_params() {
            named.push((format!("disc.{n}"), t));
        }
        encode(&named)
    }

    /// Rebuilds both networks. The segmentation input size is set to
    /// `input_size` (weights do not depend on it).
    pub fn from_bytes(bytes: &[u8], input_size: (usize, usize)) -> Result<Self, CheckpointError> {
        let mut seg = Vec::new();
        let mut disc = Vec::new();
        for (name, t) in decode(bytes)? {
            if let Some(n) = name.strip_prefix("seg.") {
                seg.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("disc.") {
                disc.push((n.to_string(), t));
            } else {
                return Err(format_err(format!("tensor {name:?} has no seg./disc. prefix")));
            }
        }
        let dim = |params: &[(String, Tensor<f32>)], name: &str, axis: usize| {
            params
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, t)| t.shape().get(axis).copied())
                .ok_or_else(|| format_err(format!("missing parameter {name}")))
        };
        let seg_config = SegNetConfig {
            stage_channels: [
                dim(&seg, "stage1.conv1.weight", 0)?,
                dim(&seg, "stage2.conv1.weight", 0)?,
                dim(&seg, "stage3.conv1.weight", 0)?,
                dim(&seg, "stage4.conv1.weight", 0)?,
            ],
            num_classes: dim(&seg, "classifier.weight", 0)?,
            in_channels: dim(&seg, "stage1.conv1.weight", 1)?,
            input_height: input_size.0,
            input_width: input_size.1,
        };
        let disc_config = DiscriminatorConfig {
            num_classes: dim(&disc, "conv1.weight", 1)?,
            hidden_channels: [
                dim(&disc, "conv1.weight", 0)?,
                dim(&disc, "conv2.weight", 0)?,
                dim(&disc, "conv3.weight", 0)?,
            ],
        };
        Ok(Checkpoint {
            seg: SegNet::from_params(seg_config, seg)?,
            disc: Discriminator::from_params(disc_config, disc)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.into(),
            source,
        })
    }

    pub fn load(path: &Path, input_size: (usize, usize)) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_bytes(&bytes, input_size)
    }
}
