//! Builds the training and validation sets a run configuration describes.

use anyhow::{Context, Result};
use ticket_core::datasets::{
    cluster_classes, generate_synthetic, load_cifar_binary, load_idx, random_relabel, rotate_images,
    split_train_val, subsample, ClassMapping, ImageDataset,
};

use crate::config::{DataFormat, DatasetConfig};

fn load_files(cfg: &DatasetConfig, paths: &[std::path::PathBuf]) -> Result<ImageDataset> {
    let ds = match cfg.format {
        DataFormat::Idx => load_idx(&paths[0], &paths[1]),
        DataFormat::Cifar => load_cifar_binary(paths),
        DataFormat::Synthetic => unreachable!("synthetic data has no files"),
    };
    ds.with_context(|| format!("loading {}", paths[0].display()))
}

/// Label rewrites and rotation, applied identically to both splits.
fn transform(cfg: &DatasetConfig, ds: ImageDataset, mapping: Option<&ClassMapping>, salt: u64) -> Result<ImageDataset> {
    let mut ds = match cfg.cluster_mode {
        Some(mode) => cluster_classes(&ds, mode, mapping)?,
        None => ds,
    };
    if cfg.random_relabel {
        ds = random_relabel(&ds, ds.n_classes, cfg.seed ^ salt)?;
    }
    if let Some(k) = cfg.label_modulo {
        let labels = ds.labels.iter().map(|l| l % k).collect();
        ds = ds.with_labels(labels, k)?;
    }
    if cfg.rotate_degrees != 0.0 {
        ds = rotate_images(&ds, cfg.rotate_degrees)?;
    }
    Ok(ds)
}

/// The full (pre-split) labelled dataset: loaded or generated, relabelled
/// and rotated.
pub fn load_full(cfg: &DatasetConfig) -> Result<ImageDataset> {
    let mapping = cfg
        .mapping_path
        .as_ref()
        .map(|p| ClassMapping::load(p).with_context(|| format!("class mapping {}", p.display())))
        .transpose()?;
    let raw = match cfg.format {
        DataFormat::Synthetic => {
            let s = cfg.synthetic.as_ref().context("missing synthetic section")?;
            generate_synthetic(s.geometry()?, s.n_per_class, s.patch, s.n_classes, s.noise_sd, cfg.seed)?
        }
        _ => load_files(cfg, &cfg.paths)?,
    };
    transform(cfg, raw, mapping.as_ref(), 0)
}

/// `(train, val)`. Validation comes from `val_paths` when given, otherwise
/// `n_val` images are split off. `fraction` subsamples the training part.
pub fn load_splits(cfg: &DatasetConfig) -> Result<(ImageDataset, ImageDataset)> {
    let full = load_full(cfg)?;
    let (train, val) = match &cfg.val_paths {
        Some(paths) => {
            let mapping = cfg
                .mapping_path
                .as_ref()
                .map(|p| ClassMapping::load(p))
                .transpose()?;
            let val = transform(cfg, load_files(cfg, paths)?, mapping.as_ref(), 1)?;
            (full, val)
        }
        None => split_train_val(&full, cfg.n_val, cfg.seed).context("splitting off validation images")?,
    };
    let train = subsample(&train, cfg.fraction, cfg.seed).context("subsampling training images")?;
    Ok((train, val))
}
