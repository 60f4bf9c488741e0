//! Per-layer magnitude pruning, rewinding and the iterative magnitude
//! pruning (IMP) loop.

use std::cmp::Ordering;
use std::ops::ControlFlow;

use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::ImageDataset;
use crate::network::{MaskSet, NetworkError, ParamSet};
use crate::rng::{stream_rng, Stream};
use crate::trainer::{train, train_from, Checkpoint, TrainConfig, TrainError, TrainRecord};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("invalid pruning config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: TrainError,
    },
    #[error("iteration observer failed: {0}")]
    Observer(String),
}

pub type Result<T> = std::result::Result<T, PruneError>;

/// Which parameters a rewind restores from the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewindScope {
    /// Weights, biases, BN scale/shift and BN running statistics.
    #[default]
    Full,
    /// Weight matrices only; everything else keeps its trained value.
    WeightsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpConfig {
    /// Fraction of surviving weights removed per iteration and layer.
    pub prune_fraction: f64,
    /// Step whose parameters every pruned network restarts from (0 = init).
    pub rewind_step: usize,
    /// Stop once more than this fraction of some pruned layer's nodes have
    /// lost every incoming connection.
    pub stop_node_fraction: f64,
    pub max_iterations: usize,
    /// 1-based hidden layers to prune; `None` prunes all of them.
    pub layers_to_prune: Option<Vec<usize>>,
    pub rewind_scope: RewindScope,
    pub train: TrainConfig,
}

impl Default for ImpConfig {
    fn default() -> Self {
        ImpConfig {
            prune_fraction: 0.3,
            rewind_step: 1000,
            stop_node_fraction: 0.8,
            max_iterations: 30,
            layers_to_prune: None,
            rewind_scope: RewindScope::Full,
            train: TrainConfig::default(),
        }
    }
}

impl ImpConfig {
    pub fn validate(&self, n_hidden: usize) -> Result<()> {
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(PruneError::Config(format!(
                "prune fraction {} outside (0, 1)",
                self.prune_fraction
            )));
        }
        if !(self.stop_node_fraction > 0.0 && self.stop_node_fraction <= 1.0) {
            return Err(PruneError::Config(format!(
                "stop node fraction {} outside (0, 1]",
                self.stop_node_fraction
            )));
        }
        if self.rewind_step > self.train.steps {
            return Err(PruneError::Config(format!(
                "rewind step {} beyond {} training steps",
                self.rewind_step, self.train.steps
            )));
        }
        let layers = self.pruned_layers(n_hidden);
        if layers.is_empty() || layers.iter().any(|&l| l == 0 || l > n_hidden) {
            return Err(PruneError::Config(format!(
                "layers to prune {layers:?} must be within 1..={n_hidden}"
            )));
        }
        self.train
            .validate()
            .map_err(|e| PruneError::Config(e.to_string()))
    }

    pub fn pruned_layers(&self, n_hidden: usize) -> Vec<usize> {
        self.layers_to_prune
            .clone()
            .unwrap_or_else(|| (1..=n_hidden).collect())
    }
}

fn check_layers(masks: &MaskSet, layers: &[usize]) -> Result<()> {
    for &l in layers {
        masks.layer(l)?;
    }
    Ok(())
}

/// Orders flat indices by `|w|`, ties by index.
fn magnitude_order(w: &Array2<f32>) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    let flat = w.as_slice().expect("standard layout weights");
    move |&a, &b| flat[a].abs().total_cmp(&flat[b].abs()).then(a.cmp(&b))
}

/// Keeps the `keep` largest-magnitude surviving weights of one layer.
fn prune_layer_to(weights: &Array2<f32>, mask: &mut Array2<bool>, keep: usize) {
    let mut alive: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if keep >= alive.len() {
        return;
    }
    let remove = alive.len() - keep;
    let order = magnitude_order(weights);
    alive.select_nth_unstable_by(remove - 1, &order);
    let flat = mask.as_slice_mut().expect("standard layout mask");
    for &i in &alive[..remove] {
        flat[i] = false;
    }
}

fn standard(params: &ParamSet<f32>) -> ParamSet<f32> {
    let mut p = params.clone();
    for l in &mut p.layers {
        if !l.weights.is_standard_layout() {
            l.weights = l.weights.as_standard_layout().into_owned();
        }
    }
    p
}

/// Removes, in each listed layer independently, the
/// `floor(fraction * surviving)` surviving weights of smallest `|w|`
/// (ties: lower flat index first). Layers without survivors are skipped.
pub fn prune_step(
    params: &ParamSet<f32>,
    masks: &MaskSet,
    fraction: f64,
    layers: &[usize],
) -> Result<MaskSet> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PruneError::Config(format!("prune fraction {fraction} outside (0, 1)")));
    }
    check_layers(masks, layers)?;
    let surviving = masks.surviving();
    let keep: Vec<usize> = layers
        .iter()
        .map(|&l| {
            let count = surviving[l - 1];
            count - (fraction * count as f64).floor() as usize
        })
        .collect();
    prune_to_counts(params, masks, layers, &keep)
}

/// Prunes each listed layer down to `keep[k]` surviving weights by
/// magnitude (never re-growing a layer).
pub fn prune_to_counts(
    params: &ParamSet<f32>,
    masks: &MaskSet,
    layers: &[usize],
    keep: &[usize],
) -> Result<MaskSet> {
    check_layers(masks, layers)?;
    if keep.len() != layers.len() {
        return Err(PruneError::Config("one keep count per layer".into()));
    }
    if !masks.matches(&params.dims()) {
        return Err(NetworkError::Shape("masks do not match parameters".into()).into());
    }
    let params = standard(params);
    let mut out = masks.clone();
    for (&l, &k) in layers.iter().zip(keep) {
        let mask = out.layer_mut(l)?;
        prune_layer_to(&params.layers[l - 1].weights, mask, k);
    }
    Ok(out)
}

/// Surviving-weight target after `n` pruning rounds of a layer with `total`
/// weights: `ceil(total * (1 - p)^n)`, which never drops below the
/// geometric law and stays within one weight of it.
pub fn surviving_target(total: usize, prune_fraction: f64, n: usize) -> usize {
    let exact = total as f64 * (1.0 - prune_fraction).powi(n as i32);
    // Guard against products like 10 * 0.7 = 7.000000000000001.
    (exact - 1e-9 * exact.max(1.0)).ceil().max(0.0) as usize
}

/// Per-layer and global densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub per_layer: Vec<f64>,
    pub global: f64,
}

pub fn density(masks: &MaskSet) -> Density {
    Density {
        per_layer: masks.layer_density(),
        global: masks.global_density(),
    }
}

/// Restores parameters from a checkpoint; masks are not touched, so every
/// surviving weight equals its checkpoint value bit for bit.
pub fn rewind(
    params: &ParamSet<f32>,
    ckpt: &Checkpoint,
    masks: &MaskSet,
    scope: RewindScope,
) -> Result<ParamSet<f32>> {
    let dims = params.dims();
    if ckpt.params.dims() != dims || !masks.matches(&dims) {
        return Err(NetworkError::Shape(format!(
            "checkpoint {:?} vs network {:?}",
            ckpt.params.dims().sizes(),
            dims.sizes()
        ))
        .into());
    }
    Ok(match scope {
        RewindScope::Full => ckpt.params.clone(),
        RewindScope::WeightsOnly => {
            let mut out = params.clone();
            for (l, c) in out.layers.iter_mut().zip(&ckpt.params.layers) {
                l.weights.assign(&c.weights);
            }
            out
        }
    })
}

/// Number of nodes of each masked layer with no incoming connection.
pub fn dead_nodes(masks: &MaskSet) -> Vec<usize> {
    masks
        .layers
        .iter()
        .map(|m| m.columns().into_iter().filter(|c| !c.iter().any(|&b| b)).count())
        .collect()
}

/// True iff in some masked layer strictly more than `threshold` of the
/// nodes have lost every incoming connection.
pub fn stop_condition(masks: &MaskSet, threshold: f64) -> bool {
    masks
        .layers
        .iter()
        .zip(dead_nodes(masks))
        .any(|(m, dead)| dead as f64 > threshold * m.ncols() as f64)
}

/// Random baseline: removes `floor(fraction * surviving)` surviving weights
/// uniformly at random in each listed layer.
pub fn random_prune(masks: &MaskSet, fraction: f64, seed: u64, layers: &[usize]) -> Result<MaskSet> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PruneError::Config(format!("prune fraction {fraction} outside (0, 1)")));
    }
    check_layers(masks, layers)?;
    let mut out = masks.clone();
    for &l in layers {
        let mask = out.layer_mut(l)?;
        let alive: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        let remove = (fraction * alive.len() as f64).floor() as usize;
        let mut rng = stream_rng(seed, Stream::RandomPrune, l as u64);
        let flat = mask.as_slice_mut().expect("standard layout mask");
        for k in index::sample(&mut rng, alive.len(), remove) {
            flat[alive[k]] = false;
        }
    }
    Ok(out)
}

/// One completed IMP iteration (`n = 0` is the dense network).
#[derive(Debug, Clone, PartialEq)]
pub struct ImpIteration {
    pub n: usize,
    /// Density over the pruned layers.
    pub density: f64,
    pub layer_density: Vec<f64>,
    pub best_val: Option<f64>,
    pub records: Vec<TrainRecord>,
    pub masks: MaskSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    NodeFraction,
    /// The observer asked to stop early.
    Interrupted,
}

#[derive(Debug, Clone)]
pub struct ImpRun {
    pub config: ImpConfig,
    pub iterations: Vec<ImpIteration>,
    pub rewind: Checkpoint,
    pub stop: StopReason,
    /// Trained parameters of the last iteration.
    pub final_params: ParamSet<f32>,
}

impl ImpRun {
    pub fn densities(&self) -> Vec<f64> {
        self.iterations.iter().map(|it| it.density).collect()
    }
}

/// Receives every finished iteration (for persistence or progress);
/// returning `Break` stops the run after that iteration.
pub trait ImpObserver {
    fn iteration_done(
        &mut self,
        iteration: &ImpIteration,
        trained: &ParamSet<f32>,
        rewind: &Checkpoint,
    ) -> std::result::Result<ControlFlow<()>, String>;
}

/// Observer that keeps nothing.
pub struct NoObserver;

impl ImpObserver for NoObserver {
    fn iteration_done(
        &mut self,
        _: &ImpIteration,
        _: &ParamSet<f32>,
        _: &Checkpoint,
    ) -> std::result::Result<ControlFlow<()>, String> {
        Ok(ControlFlow::Continue(()))
    }
}

/// State needed to continue an interrupted run.
#[derive(Debug, Clone)]
pub struct ImpResume {
    pub iterations: Vec<ImpIteration>,
    pub rewind: Checkpoint,
    pub last_params: ParamSet<f32>,
}

/// Full IMP: trains the dense network (capturing the rewind checkpoint),
/// then repeatedly prunes, rewinds and retrains.
pub fn run_imp(
    init: ParamSet<f32>,
    train_ds: &ImageDataset,
    val_ds: &ImageDataset,
    cfg: &ImpConfig,
    observer: &mut dyn ImpObserver,
) -> Result<ImpRun> {
    let dims = init.dims();
    cfg.validate(dims.n_hidden())?;
    let layers = cfg.pruned_layers(dims.n_hidden());
    let masks = MaskSet::full(&dims);
    let mut dense_cfg = cfg.train.clone();
    dense_cfg.rewind_step = Some(cfg.rewind_step);
    let outcome = train(init, &masks, train_ds, val_ds, &dense_cfg)
        .map_err(|source| PruneError::Training { iteration: 0, source })?;
    let rewind = outcome
        .rewind
        .expect("rewind step validated to lie within the dense run");
    let first = ImpIteration {
        n: 0,
        density: masks.density_of(&layers),
        layer_density: masks.layer_density(),
        best_val: outcome.best_val,
        records: outcome.records,
        masks,
    };
    let flow = observer
        .iteration_done(&first, &outcome.params, &rewind)
        .map_err(PruneError::Observer)?;
    let state = ImpResume {
        iterations: vec![first],
        rewind,
        last_params: outcome.params,
    };
    if flow.is_break() {
        return Ok(finish(cfg, state, StopReason::Interrupted));
    }
    resume_imp(train_ds, val_ds, cfg, state, observer)
}

fn finish(cfg: &ImpConfig, state: ImpResume, stop: StopReason) -> ImpRun {
    ImpRun {
        config: cfg.clone(),
        iterations: state.iterations,
        rewind: state.rewind,
        stop,
        final_params: state.last_params,
    }
}

/// Continues IMP from the last completed iteration in `state`.
pub fn resume_imp(
    train_ds: &ImageDataset,
    val_ds: &ImageDataset,
    cfg: &ImpConfig,
    mut state: ImpResume,
    observer: &mut dyn ImpObserver,
) -> Result<ImpRun> {
    let dims = state.last_params.dims();
    cfg.validate(dims.n_hidden())?;
    let layers = cfg.pruned_layers(dims.n_hidden());
    let totals: Vec<usize> = layers
        .iter()
        .map(|&l| {
            let (a, b) = dims.layer_shape(l);
            a * b
        })
        .collect();
    let mut retrain_cfg = cfg.train.clone();
    retrain_cfg.rewind_step = None;

    loop {
        let last = state.iterations.last().expect("dense iteration present");
        let n = last.n + 1;
        if n > cfg.max_iterations {
            return Ok(finish(cfg, state, StopReason::MaxIterations));
        }
        if stop_condition(&last.masks, cfg.stop_node_fraction) {
            return Ok(finish(cfg, state, StopReason::NodeFraction));
        }
        let keep: Vec<usize> = totals
            .iter()
            .map(|&t| surviving_target(t, cfg.prune_fraction, n))
            .collect();
        let masks = prune_to_counts(&state.last_params, &last.masks, &layers, &keep)?;
        let start = rewind(&state.last_params, &state.rewind, &masks, cfg.rewind_scope)?;
        let outcome = train_from(
            start,
            &masks,
            train_ds,
            val_ds,
            &retrain_cfg,
            state.rewind.step,
        )
        .map_err(|source| PruneError::Training { iteration: n, source })?;
        let it = ImpIteration {
            n,
            density: masks.density_of(&layers),
            layer_density: masks.layer_density(),
            best_val: outcome.best_val,
            records: outcome.records,
            masks,
        };
        let flow = observer
            .iteration_done(&it, &outcome.params, &state.rewind)
            .map_err(PruneError::Observer)?;
        state.iterations.push(it);
        state.last_params = outcome.params;
        if flow.is_break() {
            return Ok(finish(cfg, state, StopReason::Interrupted));
        }
    }
}
