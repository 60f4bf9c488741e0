//! Deterministic mini-batch training with periodic validation and rewind
//! checkpointing.
//!
//! Batches are drawn from per-epoch permutations (sampling without
//! replacement; the partial tail of each epoch is dropped). The permutation
//! of epoch `e` and the augmentation shifts of step `s` are pure functions
//! of `(seed, e)` and `(seed, s)`, so a run resumed at any step sees exactly
//! the data an uninterrupted run would have seen.

use ndarray::{Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{translate_batch, ImageDataset};
use crate::network::{accuracy, loss_and_grads, Grads, MaskSet, NetworkError, ParamSet, Real};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        records: Vec<TrainRecord>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub steps: usize,
    pub eval_every: usize,
    /// Capture a checkpoint after this many optimizer steps.
    pub rewind_step: Option<usize>,
    pub seed: u64,
    /// Random cyclic translation of every training image, redrawn per batch.
    pub translate_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1000,
            lr: 0.1,
            optimizer: Optimizer::Sgd,
            steps: 100_000,
            eval_every: 500,
            rewind_step: None,
            seed: 0,
            translate_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size {} < 2", self.batch_size));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("learning rate {}", self.lr));
        }
        if let Some(r) = self.rewind_step {
            if r > self.steps {
                return fail(format!("rewind_step {r} beyond steps {}", self.steps));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return fail(format!("adam parameters {beta1}, {beta2}, {eps}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Exact parameter snapshot after `step` optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ParamSet<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    /// Highest validation accuracy over `records`, `None` if nothing was
    /// evaluated.
    pub best_val: Option<f64>,
    pub records: Vec<TrainRecord>,
    pub rewind: Option<Checkpoint>,
}

/// `w <- w - lr * g` for every trainable parameter.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, grads: &Grads<T>, lr: T) {
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        layer.weights.scaled_add(-lr, &g.weights);
        layer.biases.scaled_add(-lr, &g.biases);
        if let Some(norm) = &mut layer.norm {
            if let Some(gg) = &g.gamma {
                norm.gamma.scaled_add(-lr, gg);
            }
            if let Some(gb) = &g.beta {
                norm.beta.scaled_add(-lr, gb);
            }
        }
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Grads<T>,
    pub v: Grads<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            t: 0,
            m: Grads::zeros_like(params),
            v: Grads::zeros_like(params),
        }
    }
}

fn adam_update<T: Real, D: ndarray::Dimension>(
    w: &mut ndarray::Array<T, D>,
    g: &ndarray::Array<T, D>,
    m: &mut ndarray::Array<T, D>,
    v: &mut ndarray::Array<T, D>,
    c: &AdamCoeffs<T>,
) {
    Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
        *m = c.beta1 * *m + (T::one() - c.beta1) * g;
        *v = c.beta2 * *v + (T::one() - c.beta2) * g * g;
        let m_hat = *m / c.corr1;
        let v_hat = *v / c.corr2;
        *w = *w - c.lr * m_hat / (v_hat.sqrt() + c.eps);
    });
}

struct AdamCoeffs<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    corr1: T,
    corr2: T,
}

/// One bias-corrected Adam update. Parameters whose gradient has always
/// been zero (masked weights) keep zero moments and never move.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &Grads<T>,
    lr: T,
    state: &mut AdamState<T>,
    beta1: T,
    beta2: T,
    eps: T,
) {
    state.t += 1;
    let t = state.t as i32;
    let c = AdamCoeffs {
        lr,
        beta1,
        beta2,
        eps,
        corr1: T::one() - beta1.powi(t),
        corr2: T::one() - beta2.powi(t),
    };
    for (((layer, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m.layers)
        .zip(&mut state.v.layers)
    {
        adam_update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights, &c);
        adam_update(&mut layer.biases, &g.biases, &mut m.biases, &mut v.biases, &c);
        if let Some(norm) = &mut layer.norm {
            if let (Some(gg), Some(mg), Some(vg)) = (&g.gamma, &mut m.gamma, &mut v.gamma) {
                adam_update(&mut norm.gamma, gg, mg, vg, &c);
            }
            if let (Some(gb), Some(mb), Some(vb)) = (&g.beta, &mut m.beta, &mut v.beta) {
                adam_update(&mut norm.beta, gb, mb, vb, &c);
            }
        }
    }
}

/// Deterministic batch order: epoch `e` uses a fresh permutation seeded by
/// `(seed, e)`; only complete batches are used.
pub struct BatchSchedule {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1 && batch_size <= n, "batch larger than dataset");
        BatchSchedule {
            n,
            batch_size,
            seed,
            epoch: None,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    /// Dataset rows forming the batch of optimizer step `step`.
    pub fn batch(&mut self, step: usize) -> &[usize] {
        let per_epoch = self.batches_per_epoch();
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut stream_rng(self.seed, Stream::Shuffle, epoch as u64));
            self.epoch = Some((epoch, perm));
        }
        let perm = &self.epoch.as_ref().expect("just filled").1;
        &perm[pos * self.batch_size..(pos + 1) * self.batch_size]
    }
}

/// Per-image cyclic shifts used by step `step` when augmenting.
pub fn augmentation_shifts(
    seed: u64,
    step: usize,
    count: usize,
    width: usize,
    height: usize,
) -> Vec<(i64, i64)> {
    let mut rng = stream_rng(seed, Stream::Augment, step as u64);
    (0..count)
        .map(|_| {
            (
                rng.random_range(0..width) as i64,
                rng.random_range(0..height) as i64,
            )
        })
        .collect()
}

/// Trains from step 0 to `cfg.steps`.
pub fn train(
    params: ParamSet<f32>,
    masks: &MaskSet,
    train_ds: &ImageDataset,
    val_ds: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(params, masks, train_ds, val_ds, cfg, 0)
}

/// Trains from step `start_step` to `cfg.steps`, drawing exactly the
/// batches (and augmentation shifts) an uninterrupted run from step 0 would
/// draw. Optimizer state starts fresh.
pub fn train_from(
    mut params: ParamSet<f32>,
    masks: &MaskSet,
    train_ds: &ImageDataset,
    val_ds: &ImageDataset,
    cfg: &TrainConfig,
    start_step: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(TrainError::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if cfg.batch_size > train_ds.len() {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds {} training images",
            cfg.batch_size,
            train_ds.len()
        )));
    }
    let dims = params.dims();
    params.validate(&dims).map_err(TrainError::Network)?;
    if dims.input_size() != train_ds.geometry.input_size() {
        return Err(TrainError::Config(format!(
            "network input {} vs image size {}",
            dims.input_size(),
            train_ds.geometry.input_size()
        )));
    }
    if train_ds.n_classes > dims.output_size() || val_ds.n_classes > dims.output_size() {
        return Err(TrainError::Config(format!(
            "{} outputs cannot represent {} classes",
            dims.output_size(),
            train_ds.n_classes.max(val_ds.n_classes)
        )));
    }

    let mut schedule = BatchSchedule::new(train_ds.len(), cfg.batch_size, cfg.seed);
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { .. } => Some(AdamState::new(&params)),
        Optimizer::Sgd => None,
    };
    let geom = train_ds.geometry;
    let lr = cfg.lr as f32;
    let mut records = Vec::new();
    let mut rewind = None;
    let mut window_loss = 0.0f64;
    let mut window_steps = 0usize;
    let mut batch = Array2::<f32>::zeros((cfg.batch_size, geom.input_size()));
    let mut labels = vec![0usize; cfg.batch_size];

    for step in start_step..cfg.steps {
        if cfg.rewind_step == Some(step) {
            rewind = Some(Checkpoint {
                step,
                params: params.clone(),
            });
        }
        let rows = schedule.batch(step);
        for ((mut dst, &r), label) in batch.axis_iter_mut(Axis(0)).zip(rows).zip(&mut labels) {
            dst.assign(&train_ds.images.row(r));
            *label = train_ds.labels[r];
        }
        if cfg.translate_augment {
            let shifts =
                augmentation_shifts(cfg.seed, step, cfg.batch_size, geom.width, geom.height);
            translate_batch(batch.view_mut(), &geom, &shifts);
        }

        let bp = match loss_and_grads(&params, masks, batch.view(), &labels) {
            Ok(bp) => bp,
            Err(NetworkError::NonFinite(loss)) => {
                return Err(TrainError::Diverged {
                    step,
                    loss,
                    records,
                })
            }
            Err(e) => return Err(e.into()),
        };
        if !bp.grads.all_finite() {
            return Err(TrainError::Diverged {
                step,
                loss: bp.loss as f64,
                records,
            });
        }
        params.update_running_stats(&bp.cache);
        match (&cfg.optimizer, &mut adam) {
            (Optimizer::Adam { beta1, beta2, eps }, Some(state)) => adam_step(
                &mut params,
                &bp.grads,
                lr,
                state,
                *beta1 as f32,
                *beta2 as f32,
                *eps as f32,
            ),
            _ => sgd_step(&mut params, &bp.grads, lr),
        }
        window_loss += bp.loss as f64;
        window_steps += 1;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let val_accuracy = accuracy(&params, masks, val_ds)?;
            records.push(TrainRecord {
                step: done,
                train_loss: window_loss / window_steps as f64,
                val_accuracy,
            });
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    if cfg.rewind_step == Some(cfg.steps) && start_step <= cfg.steps {
        rewind = Some(Checkpoint {
            step: cfg.steps,
            params: params.clone(),
        });
    }
    let best_val = records.iter().map(|r| r.val_accuracy).reduce(f64::max);
    Ok(TrainOutcome {
        params,
        best_val,
        records,
        rewind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, ImageGeometry, PatchRect};
    use crate::network::{init_params, forward, LayerDims, Mode};
    use ndarray::{array, Array1};

    fn one_weight_net(w: f64) -> ParamSet<f64> {
        let d = LayerDims::new(vec![1, 1, 1]).unwrap();
        let mut p: ParamSet<f64> = init_params(&d, 0);
        p.layers[0].weights[[0, 0]] = w;
        p
    }

    #[test]
    fn sgd_on_quadratic() {
        // loss 1/2 (w - 3)^2 at w = 0: gradient -3, one step with lr 0.1.
        let mut p = one_weight_net(0.0);
        let mut g = Grads::zeros_like(&p);
        g.layers[0].weights[[0, 0]] = p.layers[0].weights[[0, 0]] - 3.0;
        sgd_step(&mut p, &g, 0.1);
        assert!((p.layers[0].weights[[0, 0]] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sgd_arithmetic_and_identity() {
        let mut p = one_weight_net(1.0);
        let mut g = Grads::zeros_like(&p);
        g.layers[0].weights[[0, 0]] = 2.0;
        let before = p.clone();
        sgd_step(&mut p, &g, 0.0);
        assert_eq!(p, before);
        sgd_step(&mut p, &g, 0.1);
        assert!((p.layers[0].weights[[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let d = LayerDims::new(vec![3, 2, 2]).unwrap();
        let mut p: ParamSet<f64> = init_params(&d, 1);
        let before = p.clone();
        let mut g = Grads::zeros_like(&p);
        for l in &mut g.layers {
            l.weights.fill(1.0);
            l.biases.fill(1.0);
        }
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &g, 0.01, &mut state, 0.9, 0.999, 1e-8);
        // m_hat = 1, v_hat = 1: update = -lr * 1 / (1 + eps).
        let expect = -0.01 / (1.0 + 1e-8);
        for (a, b) in p.layers.iter().zip(&before.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y - expect).abs() < 1e-15);
            }
        }
        // gamma had zero gradient: untouched.
        assert_eq!(p.layers[0].norm, before.layers[0].norm);
    }

    #[test]
    fn adam_zero_gradients_never_move() {
        let d = LayerDims::new(vec![3, 2, 2]).unwrap();
        let mut p: ParamSet<f32> = init_params(&d, 1);
        let before = p.clone();
        let g = Grads::zeros_like(&p);
        let mut state = AdamState::new(&p);
        for _ in 0..50 {
            adam_step(&mut p, &g, 0.01, &mut state, 0.9, 0.999, 1e-8);
        }
        assert_eq!(p, before);
        assert_eq!(state.m, Grads::zeros_like(&p));
    }

    #[test]
    fn adam_trajectories_are_reproducible() {
        let d = LayerDims::new(vec![3, 2, 2]).unwrap();
        let run = || {
            let mut p: ParamSet<f32> = init_params(&d, 4);
            let mut g = Grads::zeros_like(&p);
            g.layers[0].weights = array![[0.1, -0.2], [0.3, 0.0], [1.0, 2.0]];
            let mut s = AdamState::new(&p);
            for _ in 0..10 {
                adam_step(&mut p, &g, 0.01, &mut s, 0.9, 0.999, 1e-8);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_is_a_permutation_per_epoch() {
        let mut s = BatchSchedule::new(23, 5, 9);
        assert_eq!(s.batches_per_epoch(), 4);
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..4).flat_map(|k| s.batch(epoch * 4 + k).to_vec()).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 20);
        }
        let a = s.batch(5).to_vec();
        let mut fresh = BatchSchedule::new(23, 5, 9);
        assert_eq!(fresh.batch(5), a.as_slice());
    }

    fn toy_data() -> (ImageDataset, ImageDataset) {
        let g = ImageGeometry::new(4, 4, 1).unwrap();
        let patch = PatchRect {
            x: 1,
            y: 1,
            width: 2,
            height: 2,
        };
        let all = generate_synthetic(g, 25, patch, 3, 0.1, 1).unwrap();
        crate::datasets::split_train_val(&all, 15, 2).unwrap()
    }

    fn toy_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 10,
            lr: 0.1,
            steps,
            eval_every: 7,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (tr, va) = toy_data();
        let d = LayerDims::new(vec![16, 8, 3]).unwrap();
        let p: ParamSet<f32> = init_params(&d, 0);
        let out = train(p.clone(), &MaskSet::full(&d), &tr, &va, &toy_cfg(0)).unwrap();
        assert_eq!(out.params, p);
        assert!(out.records.is_empty());
        assert_eq!(out.best_val, None);
    }

    #[test]
    fn records_and_best_val() {
        let (tr, va) = toy_data();
        let d = LayerDims::new(vec![16, 8, 3]).unwrap();
        let p: ParamSet<f32> = init_params(&d, 0);
        let out = train(p, &MaskSet::full(&d), &tr, &va, &toy_cfg(30)).unwrap();
        let steps: Vec<usize> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![7, 14, 21, 28, 30]);
        let max = out.records.iter().map(|r| r.val_accuracy).fold(0.0, f64::max);
        assert_eq!(out.best_val, Some(max));
        assert!(out.records.iter().all(|r| (0.0..=1.0).contains(&r.val_accuracy)));
    }

    #[test]
    fn learns_the_toy_task() {
        let (tr, va) = toy_data();
        let d = LayerDims::new(vec![16, 8, 3]).unwrap();
        let p: ParamSet<f32> = init_params(&d, 0);
        let out = train(p, &MaskSet::full(&d), &tr, &va, &toy_cfg(200)).unwrap();
        assert!(out.best_val.unwrap() > 0.9, "{:?}", out.best_val);
    }

    #[test]
    fn checkpoint_reproduces_logits() {
        let (tr, va) = toy_data();
        let d = LayerDims::new(vec![16, 8, 3]).unwrap();
        let m = MaskSet::full(&d);
        let p: ParamSet<f32> = init_params(&d, 0);
        let mut cfg = toy_cfg(20);
        cfg.rewind_step = Some(5);
        let full = train(p.clone(), &m, &tr, &va, &cfg).unwrap();
        let ckpt = full.rewind.unwrap();
        assert_eq!(ckpt.step, 5);
        let mut short = cfg.clone();
        short.steps = 5;
        short.rewind_step = None;
        let five = train(p, &m, &tr, &va, &short).unwrap();
        assert_eq!(ckpt.params, five.params);
        let (a, _) = forward(&ckpt.params, &m, va.images.view(), Mode::Eval).unwrap();
        let (b, _) = forward(&five.params, &m, va.images.view(), Mode::Eval).unwrap();
        assert_eq!(a, b);

        // Resuming at step 5 from the checkpoint lands on the same weights
        // as the uninterrupted run (SGD has no optimizer state).
        let resumed = train_from(ckpt.params, &m, &tr, &va, &cfg, 5).unwrap();
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn masked_weights_stay_put_during_training() {
        let (tr, va) = toy_data();
        let d = LayerDims::new(vec![16, 8, 3]).unwrap();
        let mut m = MaskSet::full(&d);
        m.layers[0].column_mut(2).fill(false);
        let p: ParamSet<f32> = init_params(&d, 0);
        for opt in [Optimizer::Sgd, Optimizer::adam()] {
            let mut cfg = toy_cfg(25);
            cfg.optimizer = opt;
            cfg.lr = 0.01;
            cfg.translate_augment = true;
            let out = train(p.clone(), &m, &tr, &va, &cfg).unwrap();
            let col: Array1<f32> = out.params.layers[0].weights.column(2).to_owned();
            assert_eq!(col, p.layers[0].weights.column(2));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va) = toy_data();
        let d = LayerDims::new(vec![16, 8, 3]).unwrap();
        let p: ParamSet<f32> = init_params(&d, 0);
        let mut cfg = toy_cfg(50);
        cfg.lr = 1e30;
        let err = train(p, &MaskSet::full(&d), &tr, &va, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            rewind_step: Some(10),
            steps: 5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let json = r#"{"batch_size": 4, "optimizer": {"kind": "adam"}}"#;
        let c: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.optimizer, Optimizer::adam());
        assert_eq!(c.lr, 0.1);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
