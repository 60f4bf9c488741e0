use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NetworkError, Result};
use crate::rng::{stream_rng, Stream};

/// Variance floor inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;
/// Running statistics follow `new = momentum * old + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Floating-point type the network can run in (`f32` for training, `f64`
/// for gradient checking).
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Layer widths `[n_0, n_1, ..., n_L]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerDims(Vec<usize>);

impl LayerDims {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 3 || sizes.contains(&0) {
            return Err(NetworkError::InvalidDims(sizes));
        }
        Ok(LayerDims(sizes))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn input_size(&self) -> usize {
        self.0[0]
    }

    pub fn output_size(&self) -> usize {
        *self.0.last().expect("validated non-empty")
    }

    /// Number of weight layers `L`.
    pub fn n_layers(&self) -> usize {
        self.0.len() - 1
    }

    /// Number of hidden layers, which is also the number of maskable layers.
    pub fn n_hidden(&self) -> usize {
        self.0.len() - 2
    }

    /// `(n_in, n_out)` of weight layer `l` (1-based).
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.0[l - 1], self.0[l])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Real> BatchNorm<T> {
    fn fresh(n: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }
}

/// One weight layer. `weights` is `n_in x n_out`, so `weights[[i, j]]`
/// connects input node `i` to output node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
    /// Present on hidden layers only.
    pub norm: Option<BatchNorm<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn dims(&self) -> LayerDims {
        let mut sizes = vec![self.layers[0].weights.nrows()];
        sizes.extend(self.layers.iter().map(|l| l.weights.ncols()));
        LayerDims(sizes)
    }

    /// Weight layer `l` (1-based).
    pub fn layer(&self, l: usize) -> &Layer<T> {
        &self.layers[l - 1]
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::from(v).expect("castable"));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::from(v).expect("castable"));
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: c2(&l.weights),
                    biases: c1(&l.biases),
                    norm: l.norm.as_ref().map(|n| BatchNorm {
                        gamma: c1(&n.gamma),
                        beta: c1(&n.beta),
                        running_mean: c1(&n.running_mean),
                        running_var: c1(&n.running_var),
                    }),
                })
                .collect(),
        }
    }

    /// Copy with every masked weight set to zero.
    pub fn masked(&self, masks: &MaskSet) -> ParamSet<T> {
        let mut out = self.clone();
        for (layer, mask) in out.layers.iter_mut().zip(&masks.layers) {
            ndarray::Zip::from(&mut layer.weights)
                .and(mask)
                .for_each(|w, &m| {
                    if !m {
                        *w = T::zero();
                    }
                });
        }
        out
    }

    /// Checks the shapes against `dims` and that running variances are
    /// non-negative.
    pub fn validate(&self, dims: &LayerDims) -> Result<()> {
        if self.layers.len() != dims.n_layers() {
            return Err(NetworkError::Shape(format!(
                "{} layers for dims {:?}",
                self.layers.len(),
                dims.sizes()
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let l = k + 1;
            let (n_in, n_out) = dims.layer_shape(l);
            let hidden = l < dims.n_layers();
            let norm_ok = match &layer.norm {
                Some(n) if hidden => {
                    [&n.gamma, &n.beta, &n.running_mean, &n.running_var]
                        .iter()
                        .all(|a| a.len() == n_out)
                        && n.running_var.iter().all(|&v| v >= T::zero())
                }
                None => !hidden,
                Some(_) => false,
            };
            if layer.weights.dim() != (n_in, n_out) || layer.biases.len() != n_out || !norm_ok {
                return Err(NetworkError::Shape(format!("layer {l} does not match {:?}", dims.sizes())));
            }
        }
        Ok(())
    }
}

/// Initializes weights i.i.d. `N(0, 2 / (n_in + n_out))`, biases and BN
/// shifts to 0, BN scales to 1, running mean 0 and running variance 1.
pub fn init_params<T: Real>(dims: &LayerDims, seed: u64) -> ParamSet<T> {
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let layers = (1..=dims.n_layers())
        .map(|l| {
            let (n_in, n_out) = dims.layer_shape(l);
            let sd = (2.0 / (n_in + n_out) as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((n_in, n_out), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z * sd)
            });
            Layer {
                weights,
                biases: Array1::zeros(n_out),
                norm: (l < dims.n_layers()).then(|| BatchNorm::fresh(n_out)),
            }
        })
        .collect();
    ParamSet { layers }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
    pub gamma: Option<Array1<T>>,
    pub beta: Option<Array1<T>>,
}

/// Gradients with the trainable shape of a [`ParamSet`] (no running
/// statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(p: &ParamSet<T>) -> Self {
        Grads {
            layers: p
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.len()),
                    gamma: l.norm.as_ref().map(|n| Array1::zeros(n.gamma.len())),
                    beta: l.norm.as_ref().map(|n| Array1::zeros(n.beta.len())),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite())
                && l.biases.iter().all(|v| v.is_finite())
                && l.gamma.iter().flatten().all(|v| v.is_finite())
                && l.beta.iter().flatten().all(|v| v.is_finite())
        })
    }
}

/// Binary masks `m^l` for the hidden weight matrices `l = 1..=L-1`; the
/// output layer and all biases are never masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub layers: Vec<Array2<bool>>,
}

impl MaskSet {
    /// All-ones masks for every hidden weight layer.
    pub fn full(dims: &LayerDims) -> Self {
        MaskSet {
            layers: (1..=dims.n_hidden())
                .map(|l| Array2::from_elem(dims.layer_shape(l), true))
                .collect(),
        }
    }

    /// Mask of weight layer `l` (1-based).
    pub fn layer(&self, l: usize) -> Result<&Array2<bool>> {
        l.checked_sub(1)
            .and_then(|k| self.layers.get(k))
            .ok_or_else(|| NetworkError::Index(format!("no mask for layer {l}")))
    }

    pub fn layer_mut(&mut self, l: usize) -> Result<&mut Array2<bool>> {
        l.checked_sub(1)
            .and_then(|k| self.layers.get_mut(k))
            .ok_or_else(|| NetworkError::Index(format!("no mask for layer {l}")))
    }

    pub fn surviving(&self) -> Vec<usize> {
        self.layers.iter().map(|m| m.iter().filter(|&&b| b).count()).collect()
    }

    /// Per-layer density `sum(m) / size`.
    pub fn layer_density(&self) -> Vec<f64> {
        self.layers
            .iter()
            .zip(self.surviving())
            .map(|(m, s)| s as f64 / m.len() as f64)
            .collect()
    }

    /// Density over the given layers (1-based): surviving / total.
    pub fn density_of(&self, layers: &[usize]) -> f64 {
        let surviving = self.surviving();
        let (alive, total) = layers.iter().fold((0usize, 0usize), |(a, t), &l| {
            (a + surviving[l - 1], t + self.layers[l - 1].len())
        });
        if total == 0 {
            1.0
        } else {
            alive as f64 / total as f64
        }
    }

    /// Global density over all masked layers.
    pub fn global_density(&self) -> f64 {
        let layers: Vec<usize> = (1..=self.layers.len()).collect();
        self.density_of(&layers)
    }

    pub fn matches(&self, dims: &LayerDims) -> bool {
        self.layers.len() == dims.n_hidden()
            && self
                .layers
                .iter()
                .enumerate()
                .all(|(k, m)| m.dim() == dims.layer_shape(k + 1))
    }

    /// True when every entry of `self` is at most the matching entry of
    /// `other` (masks only lose connections).
    pub fn is_subset_of(&self, other: &MaskSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.dim() == b.dim() && a.iter().zip(b).all(|(&x, &y)| !x || y))
    }
}

/// Copy of `masks` with every incoming connection of the listed nodes of
/// layer `layer` removed.
pub fn ablate_nodes(masks: &MaskSet, layer: usize, nodes: &[usize]) -> Result<MaskSet> {
    let mut out = masks.clone();
    let m = out.layer_mut(layer)?;
    let n = m.ncols();
    if let Some(&bad) = nodes.iter().find(|&&j| j >= n) {
        return Err(NetworkError::Index(format!(
            "node {bad} of layer {layer} (width {n})"
        )));
    }
    for &j in nodes {
        m.column_mut(j).fill(false);
    }
    Ok(out)
}
