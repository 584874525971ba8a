//! "F32G" grid files: a 16-byte header (magic `F32G`, then little-endian u32
//! width, height and channel count) followed by `channels x height x width`
//! little-endian f32 values, row-major within each channel.
//!
//! Spacing and frame metadata are not stored here; they live in the JSON
//! manifests.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, Image2D, LabelMap, Spacing};

pub const MAGIC: &[u8; 4] = b"F32G";
const HEADER_LEN: usize = 16;

/// Raw multi-channel grid as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::dims("Grid::new", width * height * channels, data.len()));
        }
        Ok(Grid {
            width,
            height,
            channels,
            data,
        })
    }

    fn from_f64(width: usize, height: usize, channels: usize, data: impl Iterator<Item = f64>) -> Self {
        Grid {
            width,
            height,
            channels,
            data: data.map(|v| v as f32).collect(),
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic, expected F32G".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (width, height, channels) = (word(0), word(1), word(2));
        if width == 0 || height == 0 || channels == 0 {
            return Err(bad(format!("empty grid {width}x{height}x{channels}")));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| bad("header dimensions overflow".into()))?;
        if bytes.len() - HEADER_LEN != expected {
            return Err(bad(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len() - HEADER_LEN
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Grid {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Grid::from_bytes(&bytes, path)
    }

    fn expect_channels(&self, channels: usize, path: &Path) -> Result<()> {
        if self.channels != channels {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected {channels} channel(s), found {}", self.channels),
            });
        }
        Ok(())
    }

    fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }
}

impl From<&Image2D> for Grid {
    fn from(img: &Image2D) -> Self {
        Grid::from_f64(img.width(), img.height(), 1, img.data().iter().copied())
    }
}

impl From<&DisplacementField> for Grid {
    fn from(phi: &DisplacementField) -> Self {
        Grid::from_f64(
            phi.width(),
            phi.height(),
            2,
            phi.dx().iter().chain(phi.dy()).copied(),
        )
    }
}

impl From<&LabelMap> for Grid {
    fn from(lbl: &LabelMap) -> Self {
        Grid::from_f64(lbl.width(), lbl.height(), lbl.classes(), lbl.data().iter().copied())
    }
}

pub fn write_image(path: &Path, img: &Image2D) -> Result<()> {
    Grid::from(img).write(path)
}

pub fn read_image(path: &Path, spacing: Spacing) -> Result<Image2D> {
    let g = Grid::read(path)?;
    g.expect_channels(1, path)?;
    Image2D::new(g.width, g.height, spacing, g.as_f64())
}

/// Channel 0 holds dx, channel 1 holds dy.
pub fn write_field(path: &Path, phi: &DisplacementField) -> Result<()> {
    Grid::from(phi).write(path)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let g = Grid::read(path)?;
    g.expect_channels(2, path)?;
    DisplacementField::new(
        g.width,
        g.height,
        g.channel(0).iter().map(|v| *v as f64).collect(),
        g.channel(1).iter().map(|v| *v as f64).collect(),
    )
}

pub fn write_labelmap(path: &Path, lbl: &LabelMap) -> Result<()> {
    Grid::from(lbl).write(path)
}

/// Reads a K-channel probability map. Values stored as f32 are renormalized
/// per pixel so the result satisfies the label-map invariant.
pub fn read_labelmap(path: &Path) -> Result<LabelMap> {
    let g = Grid::read(path)?;
    let n = g.width * g.height;
    let mut data = g.as_f64();
    for p in 0..n {
        let s: f64 = (0..g.channels).map(|k| data[k * n + p]).sum();
        if s > 0.0 {
            for k in 0..g.channels {
                data[k * n + p] /= s;
            }
        }
    }
    LabelMap::new(g.width, g.height, g.channels, data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Hard labels as a single channel of class indices.
pub fn write_class_indices(path: &Path, width: usize, height: usize, labels: &[usize]) -> Result<()> {
    Grid::from_f64(width, height, 1, labels.iter().map(|&k| k as f64)).write(path)
}

pub fn read_class_indices(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let g = Grid::read(path)?;
    g.expect_channels(1, path)?;
    let labels = g
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("class index {v} is not a non-negative integer"),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((g.width, g.height, labels))
}
