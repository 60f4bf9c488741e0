//! File formats and run directories.

mod binary;
mod images;
mod run;
mod tables;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::network::NetworkError;

pub use binary::{
    decode_checkpoint, decode_masks, encode_checkpoint, encode_masks, load_checkpoint, load_masks,
    save_checkpoint, save_masks, CHECKPOINT_MAGIC, FORMAT_VERSION, MASK_MAGIC,
};
pub use images::{
    export_locality_image, export_mask_image, export_scaled_image, export_weighted_mask_image,
    locality_image, mask_image, scaled_image, weighted_mask_image, Netpbm,
};
pub use run::{CheckpointEntry, IterationEntry, RunDir, RunKind, RunManifest, MANIFEST_FILE};
pub use tables::{
    export_imp_curve, export_locality_csv, export_rows, export_train_curve, imp_curve_csv,
    load_imp_curve, load_locality_csv, load_train_curve, locality_csv, parse_imp_curve,
    parse_locality_csv, parse_train_curve, train_curve_csv, ImpCurveRow, IMP_CURVE_HEADER,
    TRAIN_CURVE_HEADER,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("missing {0}")]
    Missing(String),
    #[error("{0} already holds a run")]
    Exists(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, ReportError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        ReportError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ReportError::Io(e.error))?;
    Ok(())
}
