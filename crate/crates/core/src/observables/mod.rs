//! Structural analyses of masks and trained networks. Everything here is a
//! pure function of its inputs.

mod locality;

use ndarray::s;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::ImageDataset;
use crate::network::{ablate_nodes, accuracy, forward, MaskSet, Mode, NetworkError, ParamSet};

pub use locality::{
    effective_masks, enrichment, locality_map, locality_map_binned, ChannelMode, EffectiveMaskSet,
    LocalityMap,
};

#[derive(Debug, Error)]
pub enum ObservableError {
    #[error("no such layer: {0}")]
    Layer(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("invalid bins: {0}")]
    Bins(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, ObservableError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    pub lower: usize,
    /// Exclusive.
    pub upper: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityHistogram {
    pub layer: usize,
    pub direction: Direction,
    pub values: Vec<usize>,
    pub bins: Vec<Bin>,
}

impl ConnectivityHistogram {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<usize>() as f64 / self.values.len() as f64
    }
}

/// Bins `[k*width, (k+1)*width)` covering `0..=max(values)`.
pub fn histogram(values: &[usize], width: usize) -> Result<Vec<Bin>> {
    if width == 0 {
        return Err(ObservableError::Bins("zero bin width".into()));
    }
    let max = values.iter().copied().max().unwrap_or(0);
    let mut bins: Vec<Bin> = (0..=max / width)
        .map(|k| Bin {
            count: 0,
            lower: k * width,
            upper: (k + 1) * width,
        })
        .collect();
    for &v in values {
        bins[v / width].count += 1;
    }
    Ok(bins)
}

/// `C^in` of the nodes of hidden layer `layer` (mask column sums), or
/// `C^out` of the nodes of layer `layer` towards layer `layer + 1` (row sums
/// of the next mask; `layer = 0` gives per-pixel counts).
pub fn connectivity(
    masks: &MaskSet,
    layer: usize,
    direction: Direction,
    bin_width: usize,
) -> Result<ConnectivityHistogram> {
    let values: Vec<usize> = match direction {
        Direction::In => {
            let m = masks.layer(layer).map_err(|_| ObservableError::Layer(layer))?;
            m.columns().into_iter().map(|c| c.iter().filter(|&&b| b).count()).collect()
        }
        Direction::Out => {
            let m = masks.layer(layer + 1).map_err(|_| ObservableError::Layer(layer))?;
            m.rows().into_iter().map(|r| r.iter().filter(|&&b| b).count()).collect()
        }
    };
    Ok(ConnectivityHistogram {
        layer,
        direction,
        bins: histogram(&values, bin_width)?,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationOrder {
    Ascending,
    Descending,
}

/// Layer-1 nodes ranked by `C^in` in the given order, ties by index.
pub fn ablation_ranking(masks: &MaskSet, order: AblationOrder) -> Result<Vec<usize>> {
    let degrees = connectivity(masks, 1, Direction::In, 1)?.values;
    let mut nodes: Vec<usize> = (0..degrees.len()).collect();
    match order {
        AblationOrder::Ascending => nodes.sort_by_key(|&j| (degrees[j], j)),
        AblationOrder::Descending => nodes.sort_by_key(|&j| (std::cmp::Reverse(degrees[j]), j)),
    }
    Ok(nodes)
}

/// Accuracy on `ds` after cutting every incoming connection of the first
/// `count` ranked layer-1 nodes, for each count. No retraining.
pub fn ablation_curve(
    params: &ParamSet<f32>,
    masks: &MaskSet,
    ds: &ImageDataset,
    order: AblationOrder,
    counts: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let ranking = ablation_ranking(masks, order)?;
    counts
        .iter()
        .map(|&count| {
            if count > ranking.len() {
                return Err(ObservableError::Argument(format!(
                    "cannot ablate {count} of {} nodes",
                    ranking.len()
                )));
            }
            let ablated = ablate_nodes(masks, 1, &ranking[..count])?;
            Ok((count, accuracy(params, &ablated, ds)?))
        })
        .collect()
}

/// `Binomial(n, u)` pmf for `k = 0..=k_max`, evaluated in log space.
pub fn binomial_reference(n: usize, u: f64, k_max: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&u) {
        return Err(ObservableError::Argument(format!("probability {u} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(k_max + 1);
    let mut ln_choose = 0.0f64;
    for k in 0..=k_max {
        if k > n {
            out.push(0.0);
            continue;
        }
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        let p = if u == 0.0 {
            if k == 0 { 1.0 } else { 0.0 }
        } else if u == 1.0 {
            if k == n { 1.0 } else { 0.0 }
        } else {
            (ln_choose + k as f64 * u.ln() + (n - k) as f64 * (1.0 - u).ln()).exp()
        };
        out.push(p);
    }
    Ok(out)
}

/// Dataset indices of the `k` inputs that most activate node `node` of
/// hidden layer `layer` (post-ReLU, eval mode), descending, ties by index.
pub fn top_activations(
    params: &ParamSet<f32>,
    masks: &MaskSet,
    ds: &ImageDataset,
    layer: usize,
    node: usize,
    k: usize,
) -> Result<Vec<usize>> {
    let dims = params.dims();
    if layer == 0 || layer > dims.n_hidden() {
        return Err(ObservableError::Layer(layer));
    }
    if node >= dims.sizes()[layer] {
        return Err(ObservableError::Argument(format!("node {node} of layer {layer}")));
    }
    if k > ds.len() {
        return Err(ObservableError::Argument(format!("{k} of {} inputs", ds.len())));
    }
    let mut acts = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(1000) {
        let end = (start + 1000).min(ds.len());
        let (_, cache) = forward(params, masks, ds.images.slice(s![start..end, ..]), Mode::Eval)?;
        acts.extend(cache.activations[layer].column(node).iter().copied());
    }
    let mut order: Vec<usize> = (0..acts.len()).collect();
    order.sort_by(|&a, &b| acts[b].total_cmp(&acts[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ImageGeometry;
    use crate::network::{init_params, LayerDims};
    use crate::pruner::random_prune;
    use ndarray::{array, Array2};

    #[test]
    fn connectivity_sums() {
        let d = LayerDims::new(vec![3, 3, 2, 2]).unwrap();
        let mut m = MaskSet::full(&d);
        let h = connectivity(&m, 1, Direction::In, 1).unwrap();
        assert_eq!(h.values, vec![3, 3, 3]);
        assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), 3);
        m.layers[0] = array![[true, false, true], [false, false, true], [true, false, false]];
        assert_eq!(connectivity(&m, 1, Direction::In, 1).unwrap().values, vec![2, 0, 2]);
        assert_eq!(connectivity(&m, 0, Direction::Out, 1).unwrap().values, vec![2, 1, 1]);
        m.layers[1] = array![[true, false], [true, true], [false, false]];
        assert_eq!(connectivity(&m, 1, Direction::Out, 2).unwrap().values, vec![1, 2, 0]);
        assert_eq!(connectivity(&m, 2, Direction::In, 1).unwrap().values, vec![2, 1]);
        assert!(connectivity(&m, 3, Direction::In, 1).is_err());
        assert!(connectivity(&m, 2, Direction::Out, 1).is_err());
    }

    #[test]
    fn in_and_out_totals_agree() {
        let d = LayerDims::new(vec![40, 30, 20, 2]).unwrap();
        let m = random_prune(&MaskSet::full(&d), 0.7, 3, &[1, 2]).unwrap();
        for l in 1..=2 {
            let cin: usize = connectivity(&m, l, Direction::In, 1).unwrap().values.iter().sum();
            let cout: usize = connectivity(&m, l - 1, Direction::Out, 1).unwrap().values.iter().sum();
            assert_eq!(cin, m.surviving()[l - 1]);
            assert_eq!(cout, cin);
        }
    }

    #[test]
    fn histogram_bins() {
        let b = histogram(&[0, 1, 5, 9, 10], 5).unwrap();
        assert_eq!(
            b.iter().map(|b| (b.count, b.lower, b.upper)).collect::<Vec<_>>(),
            vec![(2, 0, 5), (2, 5, 10), (1, 10, 15)]
        );
        assert!(histogram(&[1], 0).is_err());
    }

    #[test]
    fn binomial_examples() {
        let pmf = binomial_reference(4, 0.5, 4).unwrap();
        assert!((pmf[2] - 0.375).abs() < 1e-12);
        for n in [1usize, 17, 1000, 3072, 4096] {
            for u in [0.003, 0.04, 0.5, 0.97] {
                let pmf = binomial_reference(n, u, n).unwrap();
                assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let mode = pmf
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                let expect = ((n + 1) as f64 * u).floor() as usize;
                assert_eq!(mode, expect.min(n), "n={n} u={u}");
                assert!(pmf[..mode].windows(2).all(|w| w[0] <= w[1]));
                assert!(pmf[mode..].windows(2).all(|w| w[0] >= w[1]));
            }
        }
        assert_eq!(binomial_reference(3, 0.0, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(binomial_reference(3, 1.5, 2).is_err());
    }

    #[test]
    fn binomial_matches_statrs() {
        use statrs::distribution::{Binomial, Discrete};
        let b = Binomial::new(0.01, 3072).unwrap();
        let pmf = binomial_reference(3072, 0.01, 80).unwrap();
        for (k, p) in pmf.iter().enumerate() {
            let q = b.pmf(k as u64);
            assert!((p - q).abs() <= 1e-12 + 1e-9 * q, "k={k}");
        }
    }

    fn dataset(rows: Vec<Vec<f32>>) -> ImageDataset {
        let n = rows.len();
        let w = rows[0].len();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        let g = ImageGeometry::new(w, 1, 1).unwrap();
        ImageDataset::new(g, Array2::from_shape_vec((n, w), flat).unwrap(), vec![0; n], 2).unwrap()
    }

    fn hand_net() -> ParamSet<f32> {
        let d = LayerDims::new(vec![2, 2, 2]).unwrap();
        let mut p: ParamSet<f32> = init_params(&d, 0);
        p.layers[0].weights = array![[1.0, 0.0], [-2.0, 0.0]];
        p.layers[0].biases.fill(0.0);
        p
    }

    #[test]
    fn top_activation_cases() {
        let p = hand_net();
        let m = MaskSet::full(&p.dims());
        // node 0 pre-activation x0 - 2 x1; BN eval is identity up to eps
        let ds = dataset(vec![vec![0.2, 0.0], vec![0.9, 0.1]]);
        assert_eq!(top_activations(&p, &m, &ds, 1, 0, 1).unwrap(), vec![1]);
        let mut all = top_activations(&p, &m, &ds, 1, 0, 2).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1]);
        let mut dead = m.clone();
        dead.layers[0].column_mut(1).fill(false);
        let ds3 = dataset(vec![vec![0.5, 0.1], vec![0.9, 0.3], vec![0.1, 0.1]]);
        assert_eq!(top_activations(&p, &dead, &ds3, 1, 1, 2).unwrap(), vec![0, 1]);
        assert!(top_activations(&p, &m, &ds, 1, 0, 3).is_err());
        assert!(top_activations(&p, &m, &ds, 2, 0, 1).is_err());
        assert!(top_activations(&p, &m, &ds, 1, 2, 1).is_err());
    }

    #[test]
    fn ablation_rules() {
        let d = LayerDims::new(vec![2, 4, 2]).unwrap();
        let p: ParamSet<f32> = init_params(&d, 1);
        let mut m = MaskSet::full(&d);
        m.layers[0] = array![[true, false, true, false], [true, false, false, false]];
        assert_eq!(ablation_ranking(&m, AblationOrder::Ascending).unwrap(), vec![1, 3, 2, 0]);
        assert_eq!(ablation_ranking(&m, AblationOrder::Descending).unwrap(), vec![0, 2, 1, 3]);
        let ds = dataset(vec![vec![0.1, 0.7], vec![0.8, 0.2], vec![0.4, 0.4]]);
        let base = accuracy(&p, &m, &ds).unwrap();
        let curve = ablation_curve(&p, &m, &ds, AblationOrder::Ascending, &[0, 2]).unwrap();
        assert_eq!(curve, vec![(0, base), (2, base)]);
        assert!(ablation_curve(&p, &m, &ds, AblationOrder::Ascending, &[5]).is_err());
    }
}
