use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Grads, LayerGrads, MaskSet, ParamSet, Real, BN_EPS, BN_MOMENTUM};
use super::{NetworkError, Result};
use crate::datasets::ImageDataset;

/// Batch-norm statistics source: batch statistics (`Train`) or running
/// statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-hidden-layer batch-norm intermediates.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    /// Pre-activations `a * (w ⊙ m) + b`.
    pub pre: Array2<T>,
    /// Normalized pre-activations (before scale and shift).
    pub normalized: Array2<T>,
    /// Mean and (biased) variance used for normalization.
    pub mean: Array1<T>,
    pub var: Array1<T>,
    pub inv_std: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub mode: Mode,
    /// `activations[0]` is the input batch, `activations[l]` the post-ReLU
    /// output of hidden layer `l`, and the last entry the logits.
    pub activations: Vec<Array2<T>>,
    pub hidden: Vec<LayerCache<T>>,
    /// `w ⊙ m` per weight layer.
    pub effective_weights: Vec<Array2<T>>,
}

fn effective_weights<T: Real>(params: &ParamSet<T>, masks: &MaskSet) -> Vec<Array2<T>> {
    params
        .layers
        .iter()
        .enumerate()
        .map(|(k, layer)| match masks.layers.get(k) {
            // Select rather than multiply so stored values never leak into
            // a pass (not even as a signed zero).
            Some(m) => Zip::from(&layer.weights)
                .and(m)
                .map_collect(|&w, &keep| if keep { w } else { T::zero() }),
            None => layer.weights.clone(),
        })
        .collect()
}

fn check_shapes<T: Real>(params: &ParamSet<T>, masks: &MaskSet, width: usize) -> Result<()> {
    let dims = params.dims();
    if !masks.matches(&dims) {
        return Err(NetworkError::Shape(format!(
            "masks do not match network dims {:?}",
            dims.sizes()
        )));
    }
    if width != dims.input_size() {
        return Err(NetworkError::Shape(format!(
            "batch width {width}, network input {}",
            dims.input_size()
        )));
    }
    Ok(())
}

/// Runs the network on a batch (one sample per row). Train mode normalizes
/// with batch statistics; the caller folds them into the running averages
/// with [`ParamSet::update_running_stats`].
pub fn forward<T: Real>(
    params: &ParamSet<T>,
    masks: &MaskSet,
    batch: ArrayView2<T>,
    mode: Mode,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    check_shapes(params, masks, batch.ncols())?;
    let n = batch.nrows();
    if mode == Mode::Train && n < 2 {
        return Err(NetworkError::BatchTooSmall(n));
    }
    let eps = T::lit(BN_EPS);
    let weights = effective_weights(params, masks);
    let mut activations = vec![batch.to_owned()];
    let mut hidden = Vec::with_capacity(params.layers.len() - 1);

    for (layer, w) in params.layers.iter().zip(&weights) {
        let input = activations.last().expect("input pushed");
        let mut pre = input.dot(w);
        pre += &layer.biases;
        let Some(norm) = &layer.norm else {
            activations.push(pre);
            continue;
        };
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = pre.mean_axis(Axis(0)).expect("non-empty batch");
                let var = pre
                    .map_axis(Axis(0), |col| {
                        let m = col.mean().expect("non-empty");
                        col.iter().map(|&v| (v - m) * (v - m)).sum::<T>()
                    })
                    .mapv(|s| s / T::from(n).expect("batch size"));
                (mean, var)
            }
            Mode::Eval => (norm.running_mean.clone(), norm.running_var.clone()),
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut normalized = &pre - &mean;
        normalized *= &inv_std;
        let mut out = &normalized * &norm.gamma;
        out += &norm.beta;
        out.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        hidden.push(LayerCache {
            pre,
            normalized,
            mean,
            var,
            inv_std,
        });
        activations.push(out);
    }
    let logits = activations.last().expect("output layer").clone();
    Ok((
        logits,
        ForwardCache {
            mode,
            activations,
            hidden,
            effective_weights: weights,
        },
    ))
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Real>(logits: ArrayView2<T>) -> Array2<T> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Output of a training pass.
#[derive(Debug, Clone)]
pub struct Backprop<T> {
    /// Mean softmax cross-entropy over the batch.
    pub loss: T,
    pub grads: Grads<T>,
    pub logits: Array2<T>,
    pub cache: ForwardCache<T>,
}

/// Train-mode forward pass, mean cross-entropy and full backpropagation
/// (through batch normalization, including `gamma` and `beta`). Weight
/// gradients of masked entries are exactly zero.
pub fn loss_and_grads<T: Real>(
    params: &ParamSet<T>,
    masks: &MaskSet,
    batch: ArrayView2<T>,
    labels: &[usize],
) -> Result<Backprop<T>> {
    if labels.len() != batch.nrows() {
        return Err(NetworkError::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.nrows()
        )));
    }
    let n_out = params.layers.last().expect("non-empty").weights.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_out) {
        return Err(NetworkError::Index(format!("label {bad} with {n_out} outputs")));
    }
    let (logits, cache) = forward(params, masks, batch, Mode::Train)?;
    let n = batch.nrows();
    let n_t = T::from(n).expect("batch size");

    let mut delta = softmax_rows(logits.view());
    let mut loss = T::zero();
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        loss = loss - row[y].ln();
        row[y] = row[y] - T::one();
    }
    loss = loss / n_t;
    if !loss.is_finite() {
        return Err(NetworkError::NonFinite(loss.to_f64().unwrap_or(f64::NAN)));
    }
    delta.mapv_inplace(|v| v / n_t);

    let n_layers = params.layers.len();
    let mut grads: Vec<LayerGrads<T>> = Vec::with_capacity(n_layers);
    // `delta` holds dL/d(output of layer l) on entry to each iteration.
    for k in (0..n_layers).rev() {
        let layer = &params.layers[k];
        let (dz, gamma_grad, beta_grad) = match (&layer.norm, cache.hidden.get(k)) {
            (Some(norm), Some(bn)) => {
                let out = &cache.activations[k + 1];
                let mut dy = delta;
                Zip::from(&mut dy).and(out).for_each(|d, &o| {
                    if o <= T::zero() {
                        *d = T::zero();
                    }
                });
                let dgamma = (&dy * &bn.normalized).sum_axis(Axis(0));
                let dbeta = dy.sum_axis(Axis(0));
                let dxhat = &dy * &norm.gamma;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &bn.normalized).sum_axis(Axis(0));
                let mut dz = dxhat * n_t;
                dz -= &sum_dxhat;
                dz -= &(&bn.normalized * &sum_dxhat_xhat);
                dz *= &bn.inv_std.mapv(|s| s / n_t);
                (dz, Some(dgamma), Some(dbeta))
            }
            _ => (delta, None, None),
        };
        let input = &cache.activations[k];
        let mut dw = input.t().dot(&dz);
        if let Some(m) = masks.layers.get(k) {
            Zip::from(&mut dw).and(m).for_each(|g, &keep| {
                if !keep {
                    *g = T::zero();
                }
            });
        }
        let db = dz.sum_axis(Axis(0));
        delta = if k > 0 {
            dz.dot(&cache.effective_weights[k].t())
        } else {
            Array2::zeros((0, 0))
        };
        grads.push(LayerGrads {
            weights: dw,
            biases: db,
            gamma: gamma_grad,
            beta: beta_grad,
        });
    }
    grads.reverse();
    Ok(Backprop {
        loss,
        grads: Grads { layers: grads },
        logits,
        cache,
    })
}

impl<T: Real> ParamSet<T> {
    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let keep = T::lit(BN_MOMENTUM);
        let fresh = T::one() - keep;
        for (layer, bn) in self.layers.iter_mut().zip(&cache.hidden) {
            if let Some(norm) = &mut layer.norm {
                Zip::from(&mut norm.running_mean)
                    .and(&bn.mean)
                    .for_each(|r, &b| *r = keep * *r + fresh * b);
                Zip::from(&mut norm.running_var)
                    .and(&bn.var)
                    .for_each(|r, &b| *r = keep * *r + fresh * b);
            }
        }
    }
}

fn argmax_row(row: ndarray::ArrayView1<f32>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Rows evaluated per eval-mode pass.
const EVAL_CHUNK: usize = 1000;

/// Eval-mode predicted class per row; ties go to the lowest class index.
pub fn predict(params: &ParamSet<f32>, masks: &MaskSet, inputs: ArrayView2<f32>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.nrows());
    for chunk in inputs.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        let (logits, _) = forward(params, masks, chunk, Mode::Eval)?;
        out.extend(logits.rows().into_iter().map(argmax_row));
    }
    Ok(out)
}

/// Fraction of samples whose eval-mode argmax equals the label.
pub fn accuracy(params: &ParamSet<f32>, masks: &MaskSet, ds: &ImageDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let pred = predict(params, masks, ds.images.view())?;
    let correct = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / ds.len() as f64)
}
