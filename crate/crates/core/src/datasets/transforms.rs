//! Geometric transforms: rotation with invalid-pixel masking and cyclic
//! translation.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, ArrayViewMut2, Axis};

use super::{DatasetError, ImageDataset, ImageGeometry, Result};

/// Rotates every image counterclockwise (as displayed, y pointing down) by
/// `degrees` about the pixel-center point `((W-1)/2, (H-1)/2)`, with
/// nearest-neighbour resampling and cropping to the original size.
/// Destination pixels whose source falls outside the image are set to 0 and
/// flagged false in `valid_mask`.
pub fn rotate_images(ds: &ImageDataset, degrees: f64) -> Result<ImageDataset> {
    let g = ds.geometry;
    if g.width != g.height {
        return Err(DatasetError::InvalidArgument(format!(
            "rotation needs square images, got {}x{}",
            g.width, g.height
        )));
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let center = (g.width as f64 - 1.0) / 2.0;
    let plane = g.plane_size();

    // source[dest] for every destination pixel of one plane.
    let mut source = vec![None; plane];
    for y in 0..g.height {
        for x in 0..g.width {
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let sx = (center + cos * dx - sin * dy).round();
            let sy = (center + sin * dx + cos * dy).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < g.width && (sy as usize) < g.height {
                source[y * g.width + x] = Some(sy as usize * g.width + sx as usize);
            }
        }
    }

    let mut images = Array2::zeros(ds.images.raw_dim());
    for (src, mut dst) in ds.images.rows().into_iter().zip(images.rows_mut()) {
        for c in 0..g.channels {
            for (d, s) in source.iter().enumerate() {
                if let Some(s) = s {
                    dst[c * plane + d] = src[c * plane + s];
                }
            }
        }
    }
    let mut valid: Vec<bool> = source.iter().map(Option::is_some).collect();
    if let Some(prev) = &ds.valid_mask {
        // A pixel stays valid only if it was sourced from a valid pixel.
        for (d, s) in source.iter().enumerate() {
            valid[d] = s.is_some_and(|s| prev[s]);
        }
    }
    Ok(ImageDataset {
        geometry: g,
        images,
        labels: ds.labels.clone(),
        n_classes: ds.n_classes,
        valid_mask: Some(valid),
    })
}

/// Cyclic shift of a single flattened image: the pixel at `(x, y)` moves to
/// `((x + dx) mod W, (y + dy) mod H)` in every channel.
pub fn translate_wrap(
    image: ArrayView1<f32>,
    mut out: ArrayViewMut1<f32>,
    geom: &ImageGeometry,
    shift: (i64, i64),
) {
    let w = geom.width as i64;
    let h = geom.height as i64;
    let sx = shift.0.rem_euclid(w) as usize;
    let sy = shift.1.rem_euclid(h) as usize;
    let plane = geom.plane_size();
    for c in 0..geom.channels {
        for y in 0..geom.height {
            let ty = (y + sy) % geom.height;
            for x in 0..geom.width {
                let tx = (x + sx) % geom.width;
                out[c * plane + ty * geom.width + tx] = image[c * plane + y * geom.width + x];
            }
        }
    }
}

/// Applies one shift per image (row) of `batch` in place.
pub fn translate_batch(mut batch: ArrayViewMut2<f32>, geom: &ImageGeometry, shifts: &[(i64, i64)]) {
    assert_eq!(batch.nrows(), shifts.len(), "one shift per image");
    let mut scratch = ndarray::Array1::zeros(geom.input_size());
    for (mut row, &s) in batch.axis_iter_mut(Axis(0)).zip(shifts) {
        translate_wrap(row.view(), scratch.view_mut(), geom, s);
        row.assign(&scratch);
    }
}
