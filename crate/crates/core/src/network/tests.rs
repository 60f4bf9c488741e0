use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};

use super::*;
use crate::datasets::{ImageDataset, ImageGeometry};

fn tiny_params() -> ParamSet<f64> {
    ParamSet {
        layers: vec![
            Layer {
                weights: array![[0.5, -1.0], [2.0, 0.25]],
                biases: array![0.1, -0.2],
                norm: Some(BatchNorm {
                    gamma: array![1.5, 0.8],
                    beta: array![0.1, 0.3],
                    running_mean: array![0.0, 0.0],
                    running_var: array![1.0, 1.0],
                }),
            },
            Layer {
                weights: array![[1.0, -0.5], [0.3, 0.7]],
                biases: array![0.05, -0.05],
                norm: None,
            },
        ],
    }
}

/// Scalar re-derivation of the [2,2,2] train-mode forward pass.
fn scalar_forward(p: &ParamSet<f64>, x: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let l1 = &p.layers[0];
    let bn = l1.norm.as_ref().unwrap();
    let mut z = [[0.0; 2]; 2];
    for s in 0..2 {
        for j in 0..2 {
            z[s][j] = x[s][0] * l1.weights[[0, j]] + x[s][1] * l1.weights[[1, j]] + l1.biases[j];
        }
    }
    let mut h = [[0.0; 2]; 2];
    for j in 0..2 {
        let mean = (z[0][j] + z[1][j]) / 2.0;
        let var = ((z[0][j] - mean).powi(2) + (z[1][j] - mean).powi(2)) / 2.0;
        for s in 0..2 {
            let y = bn.gamma[j] * (z[s][j] - mean) / (var + 1e-5).sqrt() + bn.beta[j];
            h[s][j] = y.max(0.0);
        }
    }
    let l2 = &p.layers[1];
    let mut out = [[0.0; 2]; 2];
    for s in 0..2 {
        for k in 0..2 {
            out[s][k] = h[s][0] * l2.weights[[0, k]] + h[s][1] * l2.weights[[1, k]] + l2.biases[k];
        }
    }
    out
}

#[test]
fn tiny_net_matches_scalar_oracle() {
    let p = tiny_params();
    let d = p.dims();
    let m = MaskSet::full(&d);
    let x = [[0.3, -0.7], [1.2, 0.4]];
    let batch = array![[0.3, -0.7], [1.2, 0.4]];
    let (logits, _) = forward(&p, &m, batch.view(), Mode::Train).unwrap();
    let oracle = scalar_forward(&p, x);
    for s in 0..2 {
        for k in 0..2 {
            assert_abs_diff_eq!(logits[[s, k]], oracle[s][k], epsilon = 1e-6);
        }
    }
}

#[test]
fn zero_mask_gives_output_bias() {
    let d = LayerDims::new(vec![6, 5, 4, 3]).unwrap();
    let mut p: ParamSet<f32> = init_params(&d, 1);
    p.layers[2].biases = array![0.5, -1.0, 2.0];
    let mut m = MaskSet::full(&d);
    for l in &mut m.layers {
        l.fill(false);
    }
    let batch = Array2::from_shape_fn((4, 6), |(r, c)| (r + c) as f32 * 0.1);
    for mode in [Mode::Train, Mode::Eval] {
        let (logits, cache) = forward(&p, &m, batch.view(), mode).unwrap();
        for (pre, b) in cache.hidden.iter().zip(&p.layers) {
            for row in pre.pre.rows() {
                assert_eq!(row, b.biases);
            }
        }
        for row in logits.rows() {
            assert_eq!(row, p.layers[2].biases);
        }
    }
}

#[test]
fn masked_weight_values_are_invisible() {
    let d = LayerDims::new(vec![6, 5, 4, 3]).unwrap();
    let p: ParamSet<f32> = init_params(&d, 2);
    let mut m = MaskSet::full(&d);
    m.layers[0][[2, 3]] = false;
    m.layers[1][[4, 1]] = false;
    let batch = Array2::from_shape_fn((5, 6), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 11.0);
    let (base, _) = forward(&p, &m, batch.view(), Mode::Train).unwrap();
    let mut q = p.clone();
    q.layers[0].weights[[2, 3]] = 123.0;
    q.layers[1].weights[[4, 1]] = -7.5;
    let (changed, _) = forward(&q, &m, batch.view(), Mode::Train).unwrap();
    assert_eq!(base, changed);
    // Mask idempotence: pre-multiplying the weights changes nothing.
    let (premult, _) = forward(&p.masked(&m), &m, batch.view(), Mode::Train).unwrap();
    assert_eq!(base, premult);
    let bp = loss_and_grads(&q, &m, batch.view(), &[0, 1, 2, 0, 1]).unwrap();
    assert_eq!(bp.grads.layers[0].weights[[2, 3]], 0.0);
    assert_eq!(bp.grads.layers[1].weights[[4, 1]], 0.0);
}

#[test]
fn uniform_logits_cost_ln_k() {
    let d = LayerDims::new(vec![3, 4, 10]).unwrap();
    let mut p: ParamSet<f64> = init_params(&d, 0);
    p.layers[1].weights.fill(0.0);
    let m = MaskSet::full(&d);
    let batch = array![[0.1, 0.2, 0.3], [0.3, 0.1, 0.0], [0.9, 0.5, 0.2]];
    let bp = loss_and_grads(&p, &m, batch.view(), &[0, 4, 9]).unwrap();
    assert_abs_diff_eq!(bp.loss, 10f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(bp.loss, 2.302585, epsilon = 1e-6);
}

#[test]
fn softmax_rows_sum_to_one() {
    let logits = array![[1000.0f32, 0.0, -5.0], [0.1, 0.2, 0.3], [-50.0, -50.0, -50.0]];
    for row in softmax_rows(logits.view()).rows() {
        assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
    }
}

#[test]
fn train_mode_normalizes() {
    let d = LayerDims::new(vec![8, 6, 3]).unwrap();
    let p: ParamSet<f64> = init_params(&d, 7);
    let m = MaskSet::full(&d);
    let batch = Array2::from_shape_fn((16, 8), |(r, c)| ((r * 13 + c * 5) % 17) as f64 * 3.0);
    let (_, cache) = forward(&p, &m, batch.view(), Mode::Train).unwrap();
    let xhat = &cache.hidden[0].normalized;
    for col in xhat.columns() {
        let mean = col.mean().unwrap();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn batch_of_one_rejected_in_train_mode() {
    let d = LayerDims::new(vec![2, 2, 2]).unwrap();
    let p: ParamSet<f32> = init_params(&d, 0);
    let m = MaskSet::full(&d);
    let one = array![[0.1f32, 0.2]];
    assert_eq!(
        forward(&p, &m, one.view(), Mode::Train).unwrap_err(),
        NetworkError::BatchTooSmall(1)
    );
    assert!(forward(&p, &m, one.view(), Mode::Eval).is_ok());
    let wide = array![[0.1f32, 0.2, 0.3]];
    assert!(matches!(
        forward(&p, &m, wide.view(), Mode::Eval),
        Err(NetworkError::Shape(_))
    ));
}

#[test]
fn running_stats_follow_momentum() {
    let d = LayerDims::new(vec![2, 2, 2]).unwrap();
    let mut p: ParamSet<f64> = init_params(&d, 0);
    let m = MaskSet::full(&d);
    let batch = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let (_, cache) = forward(&p, &m, batch.view(), Mode::Train).unwrap();
    p.update_running_stats(&cache);
    let bn = p.layers[0].norm.as_ref().unwrap();
    for j in 0..2 {
        assert_abs_diff_eq!(bn.running_mean[j], 0.1 * cache.hidden[0].mean[j], epsilon = 1e-15);
        assert_abs_diff_eq!(
            bn.running_var[j],
            0.9 + 0.1 * cache.hidden[0].var[j],
            epsilon = 1e-15
        );
    }
}

#[test]
fn eval_is_deterministic() {
    let d = LayerDims::new(vec![6, 5, 3]).unwrap();
    let p: ParamSet<f32> = init_params(&d, 5);
    let m = MaskSet::full(&d);
    let batch = Array2::from_shape_fn((7, 6), |(r, c)| (r * c) as f32 / 42.0);
    let a = forward(&p, &m, batch.view(), Mode::Eval).unwrap().0;
    let b = forward(&p, &m, batch.view(), Mode::Eval).unwrap().0;
    assert_eq!(a, b);
}

fn constant_dataset(labels: Vec<usize>, n_classes: usize) -> ImageDataset {
    let g = ImageGeometry::new(2, 1, 1).unwrap();
    let images = Array2::from_shape_fn((labels.len(), 2), |(r, c)| ((r + c) % 3) as f32 / 3.0);
    ImageDataset::new(g, images, labels, n_classes).unwrap()
}

#[test]
fn accuracy_cases() {
    let d = LayerDims::new(vec![2, 3, 3]).unwrap();
    let mut p: ParamSet<f32> = init_params(&d, 0);
    // Constant logits: output weights zero, bias favours nothing -> ties
    // break to class 0.
    p.layers[1].weights.fill(0.0);
    let m = MaskSet::full(&d);
    let ds = constant_dataset(vec![0, 0, 0, 1, 2, 0, 1], 3);
    let majority = 4.0 / 7.0;
    assert_abs_diff_eq!(accuracy(&p, &m, &ds).unwrap(), majority, epsilon = 1e-12);

    // Bias pointing at class 2 -> always predicts 2.
    p.layers[1].biases = array![0.0, 0.0, 1.0];
    let all_two = constant_dataset(vec![2; 5], 3);
    assert_eq!(accuracy(&p, &m, &all_two).unwrap(), 1.0);

    let empty = all_two.select(&[]);
    assert_eq!(accuracy(&p, &m, &empty).unwrap_err(), NetworkError::EmptyDataset);
}

#[test]
fn untrained_thousand_classes_near_chance() {
    // 1000 balanced classes, random init: accuracy near 1e-3.
    let d = LayerDims::new(vec![16, 32, 1000]).unwrap();
    let p: ParamSet<f32> = init_params(&d, 9);
    let m = MaskSet::full(&d);
    let g = ImageGeometry::new(4, 4, 1).unwrap();
    let n = 20_000;
    let images = Array2::from_shape_fn((n, 16), |(r, c)| {
        ((r.wrapping_mul(2654435761) >> (c % 13)) % 256) as f32 / 255.0
    });
    let labels = (0..n).map(|i| i % 1000).collect();
    let ds = ImageDataset::new(g, images, labels, 1000).unwrap();
    let acc = accuracy(&p, &m, &ds).unwrap();
    assert!(acc < 5e-3, "accuracy {acc}");
}

#[test]
fn gradients_match_finite_differences_small() {
    let d = LayerDims::new(vec![4, 3, 3, 2]).unwrap();
    let mut p: ParamSet<f64> = init_params(&d, 11);
    for l in &mut p.layers {
        l.biases.mapv_inplace(|_| 0.0);
    }
    p.layers[0].norm.as_mut().unwrap().gamma = array![1.2, 0.7, 0.9];
    p.layers[1].norm.as_mut().unwrap().beta = array![0.1, -0.2, 0.3];
    let mut m = MaskSet::full(&d);
    m.layers[0][[1, 1]] = false;
    let batch = Array2::from_shape_fn((8, 4), |(r, c)| ((r * 5 + c * 3) % 7) as f64 / 7.0 - 0.4);
    let labels = [0, 1, 1, 0, 1, 0, 0, 1];
    let bp = loss_and_grads(&p, &m, batch.view(), &labels).unwrap();
    let loss = |q: &ParamSet<f64>| loss_and_grads(q, &m, batch.view(), &labels).unwrap().loss;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    for k in 0..p.layers.len() {
        for idx in 0..p.layers[k].weights.len() {
            let (i, j) = (idx / p.layers[k].weights.ncols(), idx % p.layers[k].weights.ncols());
            let mut plus = p.clone();
            plus.layers[k].weights[[i, j]] += h;
            let mut minus = p.clone();
            minus.layers[k].weights[[i, j]] -= h;
            let numeric = if k < 2 && !m.layers[k][[i, j]] {
                0.0
            } else {
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            };
            check(bp.grads.layers[k].weights[[i, j]], numeric);
        }
        for j in 0..p.layers[k].biases.len() {
            let mut plus = p.clone();
            plus.layers[k].biases[j] += h;
            let mut minus = p.clone();
            minus.layers[k].biases[j] -= h;
            check(bp.grads.layers[k].biases[j], (loss(&plus) - loss(&minus)) / (2.0 * h));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}
