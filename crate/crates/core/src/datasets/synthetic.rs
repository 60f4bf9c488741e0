//! Synthetic locality benchmark: the class is encoded only inside a
//! rectangular patch, every other pixel is label-independent noise.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetError, ImageDataset, ImageGeometry, Result};
use crate::rng::{stream_rng, Stream};

/// Background level shared by every pixel outside the patch.
const BACKGROUND: f32 = 0.5;
/// Half the gap between the two intensity levels used by class patterns.
const CONTRAST: f32 = 0.25;

/// Axis-aligned pixel rectangle `[x, x+width) x [y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PatchRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Fraction of the image plane covered by the patch.
    pub fn area_fraction(&self, geom: &ImageGeometry) -> f64 {
        self.area() as f64 / geom.plane_size() as f64
    }

    fn fits(&self, geom: &ImageGeometry) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.x + self.width <= geom.width
            && self.y + self.height <= geom.height
    }
}

/// Generates `n_per_class * n_classes` images; image `k` has class
/// `k % n_classes`. Each class owns a fixed pattern of `0.5 +- 0.25` levels
/// on the patch (pairwise distinct across classes); outside the patch every
/// pixel is `0.5`. Independent `N(0, noise_sd)` noise is added to every
/// pixel and the result clamped to `[0, 1]`.
pub fn generate_synthetic(
    geom: ImageGeometry,
    n_per_class: usize,
    patch: PatchRect,
    n_classes: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<ImageDataset> {
    if !patch.fits(&geom) {
        return Err(DatasetError::InvalidArgument(format!(
            "patch {patch:?} does not fit a {}x{} image",
            geom.width, geom.height
        )));
    }
    if n_classes < 2 {
        return Err(DatasetError::InvalidArgument("need at least two classes".into()));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(DatasetError::InvalidArgument(format!("noise_sd {noise_sd}")));
    }
    let patch_inputs: Vec<usize> = (0..geom.channels)
        .flat_map(|c| {
            (patch.y..patch.y + patch.height).flat_map(move |y| {
                (patch.x..patch.x + patch.width).map(move |x| c * geom.plane_size() + y * geom.width + x)
            })
        })
        .collect();
    let distinct_patterns = 1u128
        .checked_shl(patch_inputs.len() as u32)
        .unwrap_or(u128::MAX);
    if (n_classes as u128) > distinct_patterns {
        return Err(DatasetError::InvalidArgument(format!(
            "patch of {} inputs cannot hold {n_classes} distinct patterns",
            patch_inputs.len()
        )));
    }

    let mut rng = stream_rng(seed, Stream::Synthetic, 0);
    let mut patterns: Vec<Vec<bool>> = Vec::with_capacity(n_classes);
    while patterns.len() < n_classes {
        let p: Vec<bool> = patch_inputs.iter().map(|_| rng.random::<bool>()).collect();
        if !patterns.contains(&p) {
            patterns.push(p);
        }
    }

    let n = n_per_class * n_classes;
    let mut images = Array2::from_elem((n, geom.input_size()), BACKGROUND);
    let labels: Vec<usize> = (0..n).map(|k| k % n_classes).collect();
    for (mut row, &label) in images.rows_mut().into_iter().zip(&labels) {
        for (&i, &up) in patch_inputs.iter().zip(&patterns[label]) {
            row[i] = if up { BACKGROUND + CONTRAST } else { BACKGROUND - CONTRAST };
        }
    }
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0f32, noise_sd as f32).expect("sd validated");
        for v in images.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    ImageDataset::new(geom, images, labels, n_classes)
}
