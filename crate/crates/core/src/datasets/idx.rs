//! IDX image/label pairs (the MNIST container format).

use std::path::Path;

use ndarray::Array2;

use super::{DatasetError, ImageDataset, ImageGeometry, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DatasetError::Format(format!(
                "{} file truncated: wanted {n} bytes at offset {}, have {}",
                self.what,
                self.pos,
                self.bytes.len()
            ))),
        }
    }
}

/// Parses in-memory IDX image and label files.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<ImageDataset> {
    let mut img = Reader {
        bytes: image_bytes,
        pos: 0,
        what: "IDX image",
    };
    let magic = img.u32_be()?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let n = img.u32_be()? as usize;
    let rows = img.u32_be()? as usize;
    let cols = img.u32_be()? as usize;

    let mut lab = Reader {
        bytes: label_bytes,
        pos: 0,
        what: "IDX label",
    };
    let magic = lab.u32_be()?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let n_labels = lab.u32_be()? as usize;
    if n_labels != n {
        return Err(DatasetError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let geometry = ImageGeometry::new(cols, rows, 1)?;
    let pixels = img.take(n * rows * cols)?;
    let labels: Vec<usize> = lab.take(n)?.iter().map(|&b| b as usize).collect();
    let images = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .expect("shape computed from header");
    let n_classes = labels.iter().max().map_or(1, |m| m + 1);
    ImageDataset::new(geometry, images, labels, n_classes)
}

/// Loads an IDX image file and its companion label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let img = std::fs::read(images_path).map_err(|e| DatasetError::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| DatasetError::io(labels_path, e))?;
    parse_idx(&img, &lab)
}

/// Encodes a grayscale dataset as `(image file, label file)` bytes.
/// Pixels are quantized to `round(255 * v)`; labels must fit in a byte.
pub fn encode_idx(ds: &ImageDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.geometry.channels != 1 {
        return Err(DatasetError::InvalidArgument(
            "IDX export supports single-channel images only".into(),
        ));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(DatasetError::InvalidArgument("IDX labels must be < 256".into()));
    }
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(ds.geometry.height as u32).to_be_bytes());
    img.extend_from_slice(&(ds.geometry.width as u32).to_be_bytes());
    img.extend(ds.images.iter().map(|&v| (v * 255.0).round() as u8));

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn write_idx(ds: &ImageDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    std::fs::write(images_path, img).map_err(|e| DatasetError::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| DatasetError::io(labels_path, e))?;
    Ok(())
}

/// Encodes only a label file.
pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    if labels.iter().any(|&l| l > 255) {
        return Err(DatasetError::InvalidArgument("IDX labels must be < 256".into()));
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));
    Ok(lab)
}

/// Decodes only a label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut lab = Reader {
        bytes,
        pos: 0,
        what: "IDX label",
    };
    let magic = lab.u32_be()?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DatasetError::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = lab.u32_be()? as usize;
    Ok(lab.take(n)?.iter().map(|&b| b as usize).collect())
}
