//! CIFAR-10 binary records: one label byte followed by 3072 channel-planar
//! pixel bytes (1024 red, 1024 green, 1024 blue; each plane row-major).
//! That source order coincides with the canonical input layout.

use std::path::Path;

use ndarray::Array2;

use super::{DatasetError, ImageDataset, ImageGeometry, Result};

pub const CIFAR_RECORD_LEN: usize = 1 + 3072;
const CIFAR_CLASSES: usize = 10;

pub fn parse_cifar_binary(bytes: &[u8]) -> Result<ImageDataset> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DatasetError::Format(format!(
            "CIFAR file length {} is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        labels.push(record[0] as usize);
        pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let geometry = ImageGeometry::new(32, 32, 3)?;
    let images = Array2::from_shape_vec((n, 3072), pixels).expect("record length checked");
    ImageDataset::new(geometry, images, labels, CIFAR_CLASSES)
}

/// Loads and concatenates CIFAR-10 batch files in the given order.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<ImageDataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let chunk = std::fs::read(p).map_err(|e| DatasetError::io(p, e))?;
        if chunk.len() % CIFAR_RECORD_LEN != 0 {
            return Err(DatasetError::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD_LEN}",
                p.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar_binary(&bytes)
}

pub fn encode_cifar_binary(ds: &ImageDataset) -> Result<Vec<u8>> {
    if ds.geometry != ImageGeometry::new(32, 32, 3)? {
        return Err(DatasetError::InvalidArgument(
            "CIFAR export needs 32x32x3 images".into(),
        ));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(DatasetError::InvalidArgument("CIFAR labels must be < 256".into()));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_LEN);
    for (row, &label) in ds.images.rows().into_iter().zip(&ds.labels) {
        out.push(label as u8);
        out.extend(row.iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &ImageDataset, path: &Path) -> Result<()> {
    let bytes = encode_cifar_binary(ds)?;
    std::fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))
}
