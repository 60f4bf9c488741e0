//! Image datasets and the canonical pixel layout.
//!
//! Every image is flattened channel-planar: input index
//! `i = c*H*W + y*W + x`. All observables and export formats depend on this
//! single definition.

mod cifar;
mod idx;
mod synthetic;
mod transforms;

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Stream};

pub use cifar::{
    encode_cifar_binary, load_cifar_binary, parse_cifar_binary, write_cifar_binary, CIFAR_RECORD_LEN,
};
pub use idx::{
    encode_idx, encode_idx_labels, load_idx, parse_idx, parse_idx_labels, write_idx, IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
};
pub use synthetic::{generate_synthetic, PatchRect};
pub use transforms::{rotate_images, translate_batch, translate_wrap};

/// Human-readable statement of the flattening, embedded in manifests and
/// image headers.
pub const PIXEL_LAYOUT: &str = "i = c*H*W + y*W + x (channel-planar, row-major)";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid geometry {width}x{height}x{channels}")]
    Geometry {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("pixel ({x}, {y}, channel {c}) outside {width}x{height}x{channels}")]
    OutOfRange {
        x: usize,
        y: usize,
        c: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("{0}")]
    Format(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("label {label} is not covered by the class mapping (table length {len})")]
    UnmappedLabel { label: usize, len: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageGeometry {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(DatasetError::Geometry {
                width,
                height,
                channels,
            });
        }
        Ok(ImageGeometry {
            width,
            height,
            channels,
        })
    }

    /// Number of network inputs, `W*H*C`.
    pub fn input_size(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn plane_size(&self) -> usize {
        self.width * self.height
    }

    /// Canonical input index of pixel `(x, y)` in channel `c`.
    pub fn pixel_index(&self, x: usize, y: usize, c: usize) -> Result<usize> {
        if x >= self.width || y >= self.height || c >= self.channels {
            return Err(DatasetError::OutOfRange {
                x,
                y,
                c,
                width: self.width,
                height: self.height,
                channels: self.channels,
            });
        }
        Ok(c * self.plane_size() + y * self.width + x)
    }

    /// Inverse of [`pixel_index`](Self::pixel_index): `(x, y, c)`.
    pub fn pixel_coords(&self, i: usize) -> (usize, usize, usize) {
        let plane = self.plane_size();
        let c = i / plane;
        let rem = i % plane;
        (rem % self.width, rem / self.width, c)
    }
}

/// Free-function form of [`ImageGeometry::pixel_index`].
pub fn pixel_index(x: usize, y: usize, c: usize, geom: &ImageGeometry) -> Result<usize> {
    geom.pixel_index(x, y, c)
}

/// Images flattened in canonical layout, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub geometry: ImageGeometry,
    pub images: Array2<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Per-pixel validity plane (`W*H`), set by rotation.
    pub valid_mask: Option<Vec<bool>>,
}

impl ImageDataset {
    pub fn new(
        geometry: ImageGeometry,
        images: Array2<f32>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(DatasetError::CountMismatch {
                images: images.nrows(),
                labels: labels.len(),
            });
        }
        if images.ncols() != geometry.input_size() {
            return Err(DatasetError::Format(format!(
                "image width {} does not match geometry input size {}",
                images.ncols(),
                geometry.input_size()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DatasetError::Format(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DatasetError::Format("pixel value outside [0, 1]".into()));
        }
        Ok(ImageDataset {
            geometry,
            images,
            labels,
            n_classes,
            valid_mask: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-dataset made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> ImageDataset {
        ImageDataset {
            geometry: self.geometry,
            images: self.images.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            n_classes: self.n_classes,
            valid_mask: self.valid_mask.clone(),
        }
    }

    /// Replaces the labels, keeping pixel data untouched.
    pub fn with_labels(&self, labels: Vec<usize>, n_classes: usize) -> Result<ImageDataset> {
        if labels.len() != self.len() {
            return Err(DatasetError::CountMismatch {
                images: self.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DatasetError::Format(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        Ok(ImageDataset {
            labels,
            n_classes,
            ..self.clone()
        })
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Keeps `floor(fraction * N)` images drawn uniformly without replacement.
/// Selected images keep their original relative order.
pub fn subsample(ds: &ImageDataset, fraction: f64, seed: u64) -> Result<ImageDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidArgument(format!(
            "subsample fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let keep = (fraction * ds.len() as f64).floor() as usize;
    if keep == 0 {
        return Err(DatasetError::InvalidArgument(format!(
            "subsampling {} images by {fraction} leaves nothing",
            ds.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Subsample, 0);
    let mut rows = index::sample(&mut rng, ds.len(), keep).into_vec();
    rows.sort_unstable();
    Ok(ds.select(&rows))
}

/// Disjoint deterministic split into `(train, validation)` with `n_val`
/// validation images. `n_val = 0` returns the dataset and an empty split.
pub fn split_train_val(
    ds: &ImageDataset,
    n_val: usize,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if n_val >= ds.len() {
        return Err(DatasetError::InvalidArgument(format!(
            "validation size {n_val} must be smaller than the dataset ({})",
            ds.len()
        )));
    }
    if n_val == 0 {
        return Ok((ds.clone(), ds.select(&[])));
    }
    let mut rng = stream_rng(seed, Stream::Split, 0);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let (val, train) = order.split_at_mut(n_val);
    val.sort_unstable();
    train.sort_unstable();
    Ok((ds.select(train), ds.select(val)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    /// Macro label = original label mod 10.
    Random,
    /// Macro label looked up in a [`ClassMapping`].
    Semantic,
}

/// Original label -> macro label table. JSON form:
/// `{"n_macro": 10, "table": [..]}` indexed by original label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMapping {
    pub n_macro: usize,
    pub table: Vec<usize>,
}

impl ClassMapping {
    pub fn new(table: Vec<usize>, n_macro: usize) -> Result<Self> {
        let m = ClassMapping { n_macro, table };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut hit = vec![false; self.n_macro];
        for &t in &self.table {
            if t >= self.n_macro {
                return Err(DatasetError::Format(format!(
                    "mapping entry {t} outside [0, {})",
                    self.n_macro
                )));
            }
            hit[t] = true;
        }
        if let Some(empty) = hit.iter().position(|h| !h) {
            return Err(DatasetError::Format(format!(
                "macro class {empty} receives no original class"
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: ClassMapping = serde_json::from_str(s)
            .map_err(|e| DatasetError::Format(format!("class mapping: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::from_json_str(&s)
    }
}

/// Replaces labels by macro labels; pixel data is untouched.
pub fn cluster_classes(
    ds: &ImageDataset,
    mode: ClusterMode,
    mapping: Option<&ClassMapping>,
) -> Result<ImageDataset> {
    match mode {
        ClusterMode::Random => {
            let labels = ds.labels.iter().map(|l| l % 10).collect();
            ds.with_labels(labels, 10)
        }
        ClusterMode::Semantic => {
            let mapping = mapping.ok_or_else(|| {
                DatasetError::InvalidArgument("semantic clustering needs a class mapping".into())
            })?;
            mapping.validate()?;
            let labels = ds
                .labels
                .iter()
                .map(|&l| {
                    mapping
                        .table
                        .get(l)
                        .copied()
                        .ok_or(DatasetError::UnmappedLabel {
                            label: l,
                            len: mapping.table.len(),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            ds.with_labels(labels, mapping.n_macro)
        }
    }
}

/// Assigns every image an independent uniformly random label in
/// `[0, n_labels)`, destroying any relation between pixels and labels.
pub fn random_relabel(ds: &ImageDataset, n_labels: usize, seed: u64) -> Result<ImageDataset> {
    use rand::Rng;
    if n_labels == 0 {
        return Err(DatasetError::InvalidArgument("n_labels must be positive".into()));
    }
    let mut rng = stream_rng(seed, Stream::Relabel, 0);
    let labels = (0..ds.len()).map(|_| rng.random_range(0..n_labels)).collect();
    ds.with_labels(labels, n_labels)
}
