//! IDX image/label file parsing and writing.
//!
//! Big-endian headers: magic, then one u32 per dimension, then the raw u8
//! payload. Images use magic 0x00000803 (count x rows x cols), labels
//! 0x00000801 (count). Pixels are scaled to [0, 1]; labels become f64 class
//! indices.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::shard::Dataset;

pub const MAGIC_IMAGES: u32 = 0x0000_0803;
pub const MAGIC_LABELS: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated before {what}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses one IDX file: returns the dimension sizes and the payload slice.
fn parse_idx<'a>(bytes: &'a [u8], expect_magic: u32, name: &str) -> Result<(Vec<u32>, &'a [u8])> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != expect_magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{name}: bad magic {magic:#010x}, expected {expect_magic:#010x}"),
        });
    }
    let n_dims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for d in 0..n_dims {
        dims.push(read_u32(bytes, 4 + 4 * d, &format!("dimension {d}"))?);
    }
    let payload_start = 4 + 4 * n_dims;
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    let have = bytes.len() - payload_start;
    if have < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("{name}: truncated payload, expected {expected} bytes, found {have}"),
        });
    }
    if have > expected {
        return Err(Error::Format {
            offset: payload_start + expected,
            msg: format!("{name}: {} trailing bytes after payload", have - expected),
        });
    }
    Ok((dims, &bytes[payload_start..]))
}

/// Loads an images/labels file pair into a dataset with pixels in [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (idims, pixels) = parse_idx(&image_bytes, MAGIC_IMAGES, &images_path.display().to_string())?;
    let (ldims, raw_labels) = parse_idx(&label_bytes, MAGIC_LABELS, &labels_path.display().to_string())?;
    let n = idims[0] as usize;
    if ldims[0] as usize != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!(
                "{}: {} labels for {} images",
                labels_path.display(),
                ldims[0],
                n
            ),
        });
    }
    let dim = (idims[1] as usize) * (idims[2] as usize);
    if dim == 0 {
        return Err(Error::Format {
            offset: 8,
            msg: format!("{}: zero image dimensions", images_path.display()),
        });
    }
    let features: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<f64> = raw_labels.iter().map(|&l| f64::from(l)).collect();
    Dataset::new(features, dim, labels)
}

/// Writes an images file (magic 0x00000803, n x rows x cols, u8 pixels).
pub fn write_idx_images(path: &Path, rows: u32, cols: u32, pixels: &[u8]) -> Result<()> {
    let per = (rows as usize) * (cols as usize);
    if per == 0 || pixels.len() % per != 0 {
        return Err(Error::Shape(format!(
            "pixel count {} not divisible by {rows}x{cols}",
            pixels.len()
        )));
    }
    let n = (pixels.len() / per) as u32;
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
    out.extend_from_slice(&n.to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Writes a labels file (magic 0x00000801, u8 class indices).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}
