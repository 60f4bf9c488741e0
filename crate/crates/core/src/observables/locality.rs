//! Displacement histograms of input pairs that share a hidden node, and
//! effective input footprints of deeper nodes.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{ObservableError, Result};
use crate::datasets::ImageGeometry;
use crate::network::MaskSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Pairs within one channel; the zero displacement is excluded.
    Same,
    /// Pairs across distinct channels; the zero displacement is kept.
    Different,
}

/// Binary input footprint (`n_0 x n_l`) of every node of hidden layer
/// `layer`: the layer-1 mask itself, or the boolean product of the chain of
/// masks for deeper layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectiveMaskSet {
    pub layer: usize,
    pub mask: Array2<bool>,
}

impl EffectiveMaskSet {
    /// Footprints of hidden layer `layer` (1-based) of a mask set.
    pub fn of_layer(masks: &MaskSet, layer: usize) -> Result<Self> {
        if layer == 0 || layer > masks.layers.len() {
            return Err(ObservableError::Layer(layer));
        }
        let chain: Vec<ArrayView2<bool>> = masks.layers[..layer].iter().map(|m| m.view()).collect();
        Ok(EffectiveMaskSet {
            layer,
            mask: effective_masks(&chain)?,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.mask.ncols()
    }

    /// Surviving inputs of each node.
    pub fn in_degrees(&self) -> Vec<usize> {
        self.mask
            .columns()
            .into_iter()
            .map(|c| c.iter().filter(|&&b| b).count())
            .collect()
    }
}

/// Boolean product of a mask chain `m^1 .. m^k`: entry `(i, j)` is set iff
/// some path of surviving connections links input `i` to node `j`.
pub fn effective_masks(chain: &[ArrayView2<bool>]) -> Result<Array2<bool>> {
    let first = chain
        .first()
        .ok_or_else(|| ObservableError::Shape("empty mask chain".into()))?;
    let n_in = first.nrows();
    let words = n_in.div_ceil(64);
    // Each node's footprint as a bitset over inputs.
    let mut cols: Vec<Vec<u64>> = first
        .columns()
        .into_iter()
        .map(|c| {
            let mut bits = vec![0u64; words];
            for (i, _) in c.iter().enumerate().filter(|(_, &b)| b) {
                bits[i / 64] |= 1 << (i % 64);
            }
            bits
        })
        .collect();
    for (depth, m) in chain.iter().enumerate().skip(1) {
        if m.nrows() != cols.len() {
            return Err(ObservableError::Shape(format!(
                "mask {} has {} rows, previous layer has {} nodes",
                depth + 1,
                m.nrows(),
                cols.len()
            )));
        }
        cols = m
            .columns()
            .into_iter()
            .map(|c| {
                let mut bits = vec![0u64; words];
                for (k, _) in c.iter().enumerate().filter(|(_, &b)| b) {
                    for (acc, &w) in bits.iter_mut().zip(&cols[k]) {
                        *acc |= w;
                    }
                }
                bits
            })
            .collect();
    }
    Ok(Array2::from_shape_fn((n_in, cols.len()), |(i, j)| {
        cols[j][i / 64] >> (i % 64) & 1 == 1
    }))
}

/// Histogram `S(d)` over displacements `d = (dx, dy)`, stored as a
/// `(2H-1) x (2W-1)` grid with `d = 0` at the center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalityMap {
    pub width: usize,
    pub height: usize,
    pub mode: ChannelMode,
    pub layer: usize,
    /// Indexed `[dy + H - 1, dx + W - 1]`.
    pub grid: Array2<u64>,
}

impl LocalityMap {
    pub fn zeros(width: usize, height: usize, mode: ChannelMode, layer: usize) -> Self {
        LocalityMap {
            width,
            height,
            mode,
            layer,
            grid: Array2::zeros((2 * height - 1, 2 * width - 1)),
        }
    }

    fn cell(&self, dx: i64, dy: i64) -> Option<(usize, usize)> {
        let (w, h) = (self.width as i64, self.height as i64);
        (dx.abs() < w && dy.abs() < h).then(|| ((dy + h - 1) as usize, (dx + w - 1) as usize))
    }

    /// Count at displacement `(dx, dy)`; zero outside the grid.
    pub fn get(&self, dx: i64, dy: i64) -> u64 {
        self.cell(dx, dy).map_or(0, |c| self.grid[c])
    }

    pub fn set(&mut self, dx: i64, dy: i64, value: u64) -> Result<()> {
        let c = self
            .cell(dx, dy)
            .ok_or_else(|| ObservableError::Shape(format!("displacement ({dx}, {dy}) off the grid")))?;
        self.grid[c] = value;
        Ok(())
    }

    /// `(dx, dy, count)` for every cell, rows of `dy` ascending.
    pub fn cells(&self) -> impl Iterator<Item = (i64, i64, u64)> + '_ {
        let (w, h) = (self.width as i64, self.height as i64);
        self.grid
            .indexed_iter()
            .map(move |((r, c), &v)| (c as i64 - (w - 1), r as i64 - (h - 1), v))
    }

    pub fn total(&self) -> u64 {
        self.grid.sum()
    }

    pub fn max(&self) -> u64 {
        self.grid.iter().copied().max().unwrap_or(0)
    }

    pub fn is_symmetric(&self) -> bool {
        self.cells().all(|(dx, dy, v)| self.get(-dx, -dy) == v)
    }
}

/// Adds the pair counts of one node's surviving inputs into `grid`.
/// `by_channel[c]` holds `(x, y)` of the surviving pixels of channel `c`.
fn accumulate(
    grid: &mut Array2<u64>,
    by_channel: &[Vec<(usize, usize)>],
    geom: &ImageGeometry,
    mode: ChannelMode,
) {
    let (ox, oy) = (geom.width - 1, geom.height - 1);
    let stride = grid.ncols();
    let flat = grid.as_slice_mut().expect("standard layout grid");
    for (c, from) in by_channel.iter().enumerate() {
        for (c2, to) in by_channel.iter().enumerate() {
            let wanted = match mode {
                ChannelMode::Same => c == c2,
                ChannelMode::Different => c != c2,
            };
            if !wanted {
                continue;
            }
            for &(x, y) in from {
                // Row/column of d = (x' - x, y' - y) are (y' + oy - y, x' + ox - x).
                let base = (oy - y) * stride + (ox - x);
                for &(x2, y2) in to {
                    flat[base + y2 * stride + x2] += 1;
                }
            }
        }
    }
    if mode == ChannelMode::Same {
        flat[oy * stride + ox] = 0;
    }
}

fn check_geometry(fp: &EffectiveMaskSet, geom: &ImageGeometry) -> Result<()> {
    if fp.mask.nrows() != geom.input_size() {
        return Err(ObservableError::Geometry(format!(
            "footprint has {} inputs, geometry {}x{}x{} has {}",
            fp.mask.nrows(),
            geom.width,
            geom.height,
            geom.channels,
            geom.input_size()
        )));
    }
    Ok(())
}

fn node_pixels(fp: &EffectiveMaskSet, geom: &ImageGeometry, j: usize) -> Vec<Vec<(usize, usize)>> {
    let mut by_channel = vec![Vec::new(); geom.channels];
    for (i, _) in fp.mask.column(j).iter().enumerate().filter(|(_, &b)| b) {
        let (x, y, c) = geom.pixel_coords(i);
        by_channel[c].push((x, y));
    }
    by_channel
}

/// `S(d)`: for every node and every ordered pair of distinct surviving
/// inputs, one count at the pair's pixel displacement.
pub fn locality_map(fp: &EffectiveMaskSet, geom: &ImageGeometry, mode: ChannelMode) -> Result<LocalityMap> {
    check_geometry(fp, geom)?;
    let mut map = LocalityMap::zeros(geom.width, geom.height, mode, fp.layer);
    for j in 0..fp.n_nodes() {
        accumulate(&mut map.grid, &node_pixels(fp, geom, j), geom, mode);
    }
    Ok(map)
}

/// One map per `C^in` bin `[edges[k], edges[k+1])`, the last bin unbounded.
/// Nodes below `edges[0]` are left out.
pub fn locality_map_binned(
    fp: &EffectiveMaskSet,
    geom: &ImageGeometry,
    mode: ChannelMode,
    edges: &[usize],
) -> Result<Vec<LocalityMap>> {
    check_geometry(fp, geom)?;
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ObservableError::Bins(format!("{edges:?} not strictly ascending")));
    }
    let mut maps = vec![LocalityMap::zeros(geom.width, geom.height, mode, fp.layer); edges.len()];
    for (j, degree) in fp.in_degrees().into_iter().enumerate() {
        if degree < edges[0] {
            continue;
        }
        let bin = edges.partition_point(|&e| e <= degree) - 1;
        accumulate(&mut maps[bin].grid, &node_pixels(fp, geom, j), geom, mode);
    }
    Ok(maps)
}

/// Ratio between the share of surviving footprint entries that fall on
/// `inside` pixels and the share of inputs that are `inside`. 1 means no
/// preference; `None` when nothing survives.
pub fn enrichment(fp: &EffectiveMaskSet, geom: &ImageGeometry, inside: impl Fn(usize, usize) -> bool) -> Result<Option<f64>> {
    check_geometry(fp, geom)?;
    let flags: Vec<bool> = (0..geom.input_size())
        .map(|i| {
            let (x, y, _) = geom.pixel_coords(i);
            inside(x, y)
        })
        .collect();
    let area = flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64;
    let (mut hit, mut total) = (0usize, 0usize);
    for (row, &f) in fp.mask.rows().into_iter().zip(&flags) {
        let k = row.iter().filter(|&&b| b).count();
        total += k;
        if f {
            hit += k;
        }
    }
    if total == 0 || area == 0.0 {
        return Ok(None);
    }
    Ok(Some(hit as f64 / total as f64 / area))
}
