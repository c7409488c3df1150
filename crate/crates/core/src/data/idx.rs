//! IDX files: a big-endian magic word `0x0000_08dd` (unsigned bytes, `dd`
//! dimensions), one big-endian `u32` per dimension, then the raw bytes.
//! Images use `0x0000_0803` (count, rows, cols) and labels `0x0000_0801`.

use super::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        message: message.into(),
    })
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => format_err(offset, format!("file ends inside the {} field", what)),
    }
}

/// Parses an image file into `(count, rows, cols, pixels)`.
fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        return format_err(0, format!("image magic {:#010x}, expected {:#010x}", magic, IMAGE_MAGIC));
    }
    let n = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return format_err(
            16 + body.len(),
            format!("truncated pixel data: {} of {} bytes", body.len(), need),
        );
    }
    if body.len() > need {
        return format_err(16 + need, "trailing bytes after pixel data");
    }
    Ok((n, rows, cols, body))
}

fn parse_labels(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != LABEL_MAGIC {
        return format_err(0, format!("label magic {:#010x}, expected {:#010x}", magic, LABEL_MAGIC));
    }
    let n = read_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return format_err(8 + body.len(), format!("truncated labels: {} of {} bytes", body.len(), n));
    }
    if body.len() > n {
        return format_err(8 + n, "trailing bytes after labels");
    }
    Ok((n, body))
}

fn pixels_to_features(n: usize, rows: usize, cols: usize, px: &[u8]) -> Result<Tensor> {
    let data = px.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, rows * cols], data)
}

/// Loads images and labels; pixels become `byte / 255` in row-major order.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Batch> {
    let ib = std::fs::read(images)?;
    let lb = std::fs::read(labels)?;
    let (n, rows, cols, px) = parse_images(&ib)?;
    let (nl, lab) = parse_labels(&lb)?;
    if nl != n {
        return format_err(4, format!("label count {} differs from image count {}", nl, n));
    }
    let features = pixels_to_features(n, rows, cols, px)?;
    Batch::new(features, Some(lab.iter().map(|&b| b as usize).collect()))
}

/// Loads an image file without labels.
pub fn load_idx_images(images: &Path) -> Result<Batch> {
    let ib = std::fs::read(images)?;
    let (n, rows, cols, px) = parse_images(&ib)?;
    Batch::new(pixels_to_features(n, rows, cols, px)?, None)
}

/// Writes a batch as an IDX image file (and label file when the batch is
/// labeled). Features are quantized to `round(255·x)`, so only values of the
/// form `k/255` survive a round trip exactly.
pub fn write_idx(batch: &Batch, rows: usize, cols: usize, images: &Path, labels: Option<&Path>) -> Result<()> {
    let (n, d) = batch.features.dims2()?;
    if rows * cols != d {
        return Err(Error::Dimension(format!("{}x{} images need {} features, got {}", rows, cols, rows * cols, d)));
    }
    if batch.features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("IDX pixels must lie in [0, 1]".into()));
    }
    let mut out = Vec::with_capacity(16 + n * d);
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(batch.features.data().iter().map(|&v| (v * 255.0).round() as u8));
    std::fs::write(images, out)?;
    if let Some(path) = labels {
        let l = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract("cannot write labels of an unlabeled batch".into()))?;
        if let Some(&bad) = l.iter().find(|&&t| t > u8::MAX as usize) {
            return Err(Error::Domain(format!("label {} does not fit in a byte", bad)));
        }
        let mut out = Vec::with_capacity(8 + n);
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(n as u32).to_be_bytes());
        out.extend(l.iter().map(|&t| t as u8));
        std::fs::write(path, out)?;
    }
    Ok(())
}
