//! CSV tables. Floats are written in shortest round-trip form, so parsing
//! a table back gives the exact values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, ReportError, Result};
use crate::datasets::PIXEL_LAYOUT;
use crate::observables::{ChannelMode, LocalityMap};
use crate::trainer::TrainRecord;

fn to_csv<R: Serialize>(header: &[&str], rows: &[R], preamble: &str) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(preamble.as_bytes().to_vec());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| ReportError::Format(format!("csv buffer: {e}")))
}

fn from_csv<R: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<R>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(ReportError::from))
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(super::read(path)?).map_err(|e| ReportError::Format(format!("{}: {e}", path.display())))
}

pub const TRAIN_CURVE_HEADER: [&str; 3] = ["step", "train_loss", "val_accuracy"];

pub fn train_curve_csv(records: &[TrainRecord]) -> Result<Vec<u8>> {
    to_csv(&TRAIN_CURVE_HEADER, records, "")
}

pub fn export_train_curve(records: &[TrainRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &train_curve_csv(records)?)
}

pub fn parse_train_curve(text: &str) -> Result<Vec<TrainRecord>> {
    from_csv(text)
}

pub fn load_train_curve(path: impl AsRef<Path>) -> Result<Vec<TrainRecord>> {
    parse_train_curve(&read_text(path.as_ref())?)
}

/// One row of the accuracy-versus-density table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpCurveRow {
    pub iteration: usize,
    pub u: f64,
    pub best_val: Option<f64>,
}

pub const IMP_CURVE_HEADER: [&str; 3] = ["iteration", "u", "best_val"];

pub fn imp_curve_csv(rows: &[ImpCurveRow]) -> Result<Vec<u8>> {
    to_csv(&IMP_CURVE_HEADER, rows, "")
}

pub fn export_imp_curve(rows: &[ImpCurveRow], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &imp_curve_csv(rows)?)
}

pub fn parse_imp_curve(text: &str) -> Result<Vec<ImpCurveRow>> {
    from_csv(text)
}

pub fn load_imp_curve(path: impl AsRef<Path>) -> Result<Vec<ImpCurveRow>> {
    parse_imp_curve(&read_text(path.as_ref())?)
}

#[derive(Serialize, Deserialize)]
struct LocalityRow {
    dx: i64,
    dy: i64,
    count: u64,
}

fn mode_name(mode: ChannelMode) -> &'static str {
    match mode {
        ChannelMode::Same => "same",
        ChannelMode::Different => "different",
    }
}

/// `dx,dy,count` for every grid cell, after a `#` line giving the layer,
/// channel mode, grid extent and pixel layout.
pub fn locality_csv(map: &LocalityMap) -> Result<Vec<u8>> {
    let preamble = format!(
        "# layer={} mode={} width={} height={} layout={}\n",
        map.layer,
        mode_name(map.mode),
        map.width,
        map.height,
        PIXEL_LAYOUT.replace(' ', "")
    );
    let rows: Vec<LocalityRow> = map
        .cells()
        .map(|(dx, dy, count)| LocalityRow { dx, dy, count })
        .collect();
    to_csv(&["dx", "dy", "count"], &rows, &preamble)
}

pub fn export_locality_csv(map: &LocalityMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &locality_csv(map)?)
}

pub fn parse_locality_csv(text: &str) -> Result<LocalityMap> {
    let meta = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| ReportError::Format("locality table lacks its # header".into()))?;
    let field = |key: &str| {
        meta.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
            .ok_or_else(|| ReportError::Format(format!("locality header lacks {key}")))
    };
    let num = |key: &str| -> Result<usize> {
        field(key)?
            .parse()
            .map_err(|e| ReportError::Format(format!("{key}: {e}")))
    };
    let mode = match field("mode")? {
        "same" => ChannelMode::Same,
        "different" => ChannelMode::Different,
        other => return Err(ReportError::Format(format!("unknown channel mode {other}"))),
    };
    let (width, height) = (num("width")?, num("height")?);
    if width == 0 || height == 0 {
        return Err(ReportError::Format("empty locality grid".into()));
    }
    let mut map = LocalityMap::zeros(width, height, mode, num("layer")?);
    let rows: Vec<LocalityRow> = from_csv(text)?;
    if rows.len() != map.grid.len() {
        return Err(ReportError::Format(format!(
            "{} rows for a {}-cell grid",
            rows.len(),
            map.grid.len()
        )));
    }
    for r in rows {
        map.set(r.dx, r.dy, r.count)
            .map_err(|e| ReportError::Format(e.to_string()))?;
    }
    Ok(map)
}

pub fn load_locality_csv(path: impl AsRef<Path>) -> Result<LocalityMap> {
    parse_locality_csv(&read_text(path.as_ref())?)
}

/// Writes rows under the given header, for small ad-hoc tables.
pub fn export_rows<R: Serialize>(header: &[&str], rows: &[R], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_csv(header, rows, "")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_curves_are_header_only() {
        assert_eq!(train_curve_csv(&[]).unwrap(), b"step,train_loss,val_accuracy\n");
        assert_eq!(imp_curve_csv(&[]).unwrap(), b"iteration,u,best_val\n");
    }

    #[test]
    fn single_imp_row() {
        let rows = [ImpCurveRow {
            iteration: 0,
            u: 1.0,
            best_val: Some(0.8125),
        }];
        let text = String::from_utf8(imp_curve_csv(&rows).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_imp_curve(&text).unwrap(), rows);
        let none = [ImpCurveRow {
            iteration: 3,
            u: 0.343,
            best_val: None,
        }];
        let text = String::from_utf8(imp_curve_csv(&none).unwrap()).unwrap();
        assert_eq!(parse_imp_curve(&text).unwrap(), none);
    }

    #[test]
    fn zero_map_table() {
        let map = LocalityMap::zeros(2, 2, ChannelMode::Different, 2);
        let text = String::from_utf8(locality_csv(&map).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 2 + 9);
        assert!(text.lines().skip(2).all(|l| l.ends_with(",0")));
        assert_eq!(parse_locality_csv(&text).unwrap(), map);
        assert!(parse_locality_csv("dx,dy,count\n").is_err());
    }

    proptest! {
        #[test]
        fn floats_survive(loss in any::<f64>(), acc in 0.0f64..1.0, step in any::<u32>()) {
            prop_assume!(loss.is_finite());
            let recs = vec![TrainRecord { step: step as usize, train_loss: loss, val_accuracy: acc }];
            let text = String::from_utf8(train_curve_csv(&recs).unwrap()).unwrap();
            prop_assert_eq!(parse_train_curve(&text).unwrap(), recs);
        }

        #[test]
        fn locality_round_trip(w in 1usize..6, h in 1usize..6, cells in proptest::collection::vec(any::<u64>(), 121)) {
            let mut map = LocalityMap::zeros(w, h, ChannelMode::Same, 1);
            for (slot, v) in map.grid.iter_mut().zip(cells) {
                *slot = v;
            }
            let text = String::from_utf8(locality_csv(&map).unwrap()).unwrap();
            prop_assert_eq!(parse_locality_csv(&text).unwrap(), map);
        }
    }
}
