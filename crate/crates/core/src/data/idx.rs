//! IDX (LeCun) binary format for unsigned-byte image and label files.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// One flattened image per row, pixels scaled into `[0, 1]`.
    Images {
        images: Matrix,
        rows: usize,
        cols: usize,
    },
    Labels(Vec<usize>),
}

fn idx_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Idx {
        offset,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            idx_err(
                bytes.len(),
                format!("header truncated, expected 4 bytes at offset {offset}"),
            )
        })
}

/// Decompresses gzip input (detected by its `1f 8b` prefix); other input is
/// returned unchanged.
pub fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| idx_err(0, format!("invalid gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Parses an IDX image (`0x803`) or label (`0x801`) file, plain or gzipped.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return parse_idx(&maybe_gunzip(bytes.to_vec())?);
    }
    let magic = read_u32(bytes, 0)?;
    let (ndims, header_len) = match magic {
        IMAGES_MAGIC => (3, 16),
        LABELS_MAGIC => (1, 8),
        other => return Err(idx_err(0, format!("unsupported magic number {other:#010x}"))),
    };
    let dims: Vec<usize> = (0..ndims)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| idx_err(4, "dimension product overflows"))?;
    let payload = &bytes[header_len..];
    if payload.len() < expected {
        return Err(idx_err(
            bytes.len(),
            format!(
                "payload truncated: header declares {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(idx_err(
            header_len + expected,
            format!(
                "payload has {} bytes beyond the {expected} declared by the header",
                payload.len() - expected
            ),
        ));
    }
    if magic == LABELS_MAGIC {
        return Ok(IdxData::Labels(payload.iter().map(|&b| b as usize).collect()));
    }
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxData::Images {
        images: Matrix::new(n, rows * cols, data)?,
        rows,
        cols,
    })
}

pub fn read_idx_file(path: &Path) -> Result<IdxData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes).map_err(|e| match e {
        Error::Idx { offset, reason } => Error::Idx {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

/// Serializes images, quantizing each pixel to `round(255·x)`.
pub fn write_idx_images(images: &Matrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != images.cols() {
        return Err(Error::invalid(format!(
            "{rows}x{cols} images do not match {} pixels per row",
            images.cols()
        )));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, images.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        images
            .as_slice()
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}
