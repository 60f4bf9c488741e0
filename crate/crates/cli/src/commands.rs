//! Subcommand implementations. Each returns the files it wrote.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use ticket_core::datasets::{write_cifar_binary, write_idx, ImageDataset, ImageGeometry};
use ticket_core::network::{init_params, MaskSet, ParamSet};
use ticket_core::observables::{
    ablation_curve, binomial_reference, connectivity, locality_map, locality_map_binned, AblationOrder,
    ChannelMode, Direction, EffectiveMaskSet,
};
use ticket_core::pruner::{resume_imp, run_imp, ImpIteration, ImpObserver, StopReason};
use ticket_core::reports::{
    export_locality_csv, export_locality_image, export_mask_image, export_rows, export_scaled_image,
    export_weighted_mask_image, CheckpointEntry, RunDir, RunKind, RunManifest,
};
use ticket_core::trainer::{train, Checkpoint};

use crate::config::{DataFormat, RunConfig};
use crate::data::{load_full, load_splits};

fn check_fit(cfg: &RunConfig, train: &ImageDataset) -> Result<()> {
    let dims = cfg.dims()?;
    ensure!(
        dims.input_size() == train.geometry.input_size(),
        "network input {} does not match {} pixel values per image",
        dims.input_size(),
        train.geometry.input_size()
    );
    ensure!(
        dims.output_size() >= train.n_classes,
        "network output {} cannot hold {} classes",
        dims.output_size(),
        train.n_classes
    );
    Ok(())
}

fn manifest(cfg: &RunConfig, kind: RunKind, geometry: ImageGeometry) -> Result<RunManifest> {
    let seeds = BTreeMap::from([
        ("dataset".to_string(), cfg.dataset.seed),
        ("train".to_string(), cfg.train.seed),
    ]);
    Ok(RunManifest::new(
        kind,
        serde_json::to_value(cfg)?,
        seeds,
        cfg.network.dims.clone(),
        geometry,
    ))
}

/// Dense training only: final parameters, the optional rewind checkpoint
/// and the training curve.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunDir> {
    let (train_ds, val_ds) = load_splits(&cfg.dataset)?;
    check_fit(cfg, &train_ds)?;
    let dims = cfg.dims()?;
    let tcfg = cfg.train_config();
    let mut run = RunDir::create(&cfg.output.run_dir, manifest(cfg, RunKind::Train, train_ds.geometry)?)?;
    let init = init_params(&dims, cfg.train.seed);
    let outcome = train(init, &MaskSet::full(&dims), &train_ds, &val_ds, &tcfg)?;
    run.put_checkpoint("final.tkts", &outcome.params)?;
    run.put_train_curve("train_curve.csv", &outcome.records)?;
    if let Some(ckpt) = &outcome.rewind {
        run.put_checkpoint("rewind.tkts", &ckpt.params)?;
        run.manifest.rewind = Some(CheckpointEntry {
            step: ckpt.step,
            path: "rewind.tkts".into(),
        });
    }
    run.manifest.checkpoints = vec![CheckpointEntry {
        step: tcfg.steps,
        path: "final.tkts".into(),
    }];
    run.manifest.curve = Some("train_curve.csv".into());
    run.finish(None)?;
    Ok(run)
}

/// Persists every iteration and reports progress on stderr; `stop_after`
/// ends the process-level run early (the directory stays resumable).
struct Progress<'a> {
    run: &'a mut RunDir,
    stop_after: Option<usize>,
    quiet: bool,
}

impl ImpObserver for Progress<'_> {
    fn iteration_done(
        &mut self,
        it: &ImpIteration,
        trained: &ParamSet<f32>,
        rewind: &Checkpoint,
    ) -> std::result::Result<ControlFlow<()>, String> {
        self.run
            .record_iteration(it, trained, rewind)
            .map_err(|e| e.to_string())?;
        if !self.quiet {
            let best = it.best_val.map_or("-".to_string(), |v| format!("{v:.4}"));
            eprintln!("iteration {}: u={:.4} best_val={best}", it.n, it.density);
        }
        Ok(match self.stop_after {
            Some(n) if it.n >= n => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ImpOptions {
    /// Stop (resumably) once this iteration has been written.
    pub stop_after: Option<usize>,
    pub quiet: bool,
}

/// Full IMP run. An unfinished run in the same directory with the same
/// configuration is continued from its last recorded iteration.
pub fn cmd_imp(cfg: &RunConfig, opts: ImpOptions) -> Result<RunDir> {
    let dims = cfg.dims()?;
    let icfg = cfg.imp_config();
    icfg.validate(dims.n_hidden())?;
    let (train_ds, val_ds) = load_splits(&cfg.dataset)?;
    check_fit(cfg, &train_ds)?;
    let layers = icfg.pruned_layers(dims.n_hidden());

    let existing = cfg.output.run_dir.join(ticket_core::reports::MANIFEST_FILE).exists();
    let mut run = if existing {
        let run = RunDir::open(&cfg.output.run_dir)?;
        ensure!(!run.manifest.complete, "{} holds a completed run", cfg.output.run_dir.display());
        ensure!(run.manifest.kind == RunKind::Imp, "{} holds a training run", cfg.output.run_dir.display());
        ensure!(
            run.manifest.config == serde_json::to_value(cfg)?,
            "configuration differs from the unfinished run in {}",
            cfg.output.run_dir.display()
        );
        run
    } else {
        RunDir::create(&cfg.output.run_dir, manifest(cfg, RunKind::Imp, train_ds.geometry)?)?
    };
    let resume = (!run.manifest.iterations.is_empty())
        .then(|| run.resume_state(&layers))
        .transpose()?;
    let mut progress = Progress {
        run: &mut run,
        stop_after: opts.stop_after,
        quiet: opts.quiet,
    };
    let outcome = match resume {
        Some(state) => resume_imp(&train_ds, &val_ds, &icfg, state, &mut progress)?,
        None => run_imp(init_params(&dims, cfg.train.seed), &train_ds, &val_ds, &icfg, &mut progress)?,
    };
    if outcome.stop != StopReason::Interrupted {
        run.finish(Some(outcome.stop))?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Observable {
    Conn,
    Locality,
    LocalityBinned,
    Effmask,
    Pixmap,
    Binomial,
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub layer: usize,
    pub channel: ChannelMode,
    pub direction: Direction,
    pub bin_width: usize,
    pub bins: Vec<usize>,
    pub out: Option<PathBuf>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            layer: 1,
            channel: ChannelMode::Same,
            direction: Direction::In,
            bin_width: 1,
            bins: vec![0],
            out: None,
        }
    }
}

fn out_dir(run: &RunDir, out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| run.root().join("analysis"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn mode_tag(mode: ChannelMode) -> &'static str {
    match mode {
        ChannelMode::Same => "same",
        ChannelMode::Different => "diff",
    }
}

#[derive(Serialize)]
struct NodeCount {
    node: usize,
    count: usize,
}

#[derive(Serialize)]
struct BinRow {
    lower: usize,
    upper: usize,
    count: usize,
}

#[derive(Serialize)]
struct PixelCount {
    x: usize,
    y: usize,
    c: usize,
    count: usize,
}

#[derive(Serialize)]
struct BinomialRow {
    k: usize,
    observed: usize,
    expected: f64,
}

pub fn cmd_analyze(run_dir: &Path, iteration: usize, what: Observable, opts: &AnalyzeOptions) -> Result<Vec<PathBuf>> {
    let run = RunDir::open(run_dir)?;
    let (masks, _) = run.load_iteration(iteration)?;
    let geom = run.manifest.geometry;
    let dir = out_dir(&run, &opts.out)?;
    let l = opts.layer;
    let tag = format!("iter{iteration:03}");
    let mut written = Vec::new();
    match what {
        Observable::Conn => {
            let hist = connectivity(&masks, l, opts.direction, opts.bin_width)?;
            let dir_tag = match opts.direction {
                Direction::In => "in",
                Direction::Out => "out",
            };
            let nodes: Vec<NodeCount> = hist
                .values
                .iter()
                .enumerate()
                .map(|(node, &count)| NodeCount { node, count })
                .collect();
            let p = dir.join(format!("conn_l{l}_{dir_tag}_{tag}.csv"));
            export_rows(&["node", "count"], &nodes, &p)?;
            written.push(p);
            let bins: Vec<BinRow> = hist
                .bins
                .iter()
                .map(|b| BinRow {
                    lower: b.lower,
                    upper: b.upper,
                    count: b.count,
                })
                .collect();
            let p = dir.join(format!("conn_hist_l{l}_{dir_tag}_{tag}.csv"));
            export_rows(&["lower", "upper", "count"], &bins, &p)?;
            written.push(p);
        }
        Observable::Locality => {
            let fp = EffectiveMaskSet::of_layer(&masks, l)?;
            let map = locality_map(&fp, &geom, opts.channel)?;
            let stem = format!("locality_l{l}_{}_{tag}", mode_tag(opts.channel));
            for (ext, csv) in [("csv", true), ("pgm", false)] {
                let p = dir.join(format!("{stem}.{ext}"));
                if csv {
                    export_locality_csv(&map, &p)?;
                } else {
                    export_locality_image(&map, &p)?;
                }
                written.push(p);
            }
        }
        Observable::LocalityBinned => {
            let fp = EffectiveMaskSet::of_layer(&masks, l)?;
            let maps = locality_map_binned(&fp, &geom, opts.channel, &opts.bins)?;
            for (k, map) in maps.iter().enumerate() {
                let upper = opts.bins.get(k + 1).map_or("inf".to_string(), |e| e.to_string());
                let stem = format!("locality_l{l}_{}_cin{}-{upper}_{tag}", mode_tag(opts.channel), opts.bins[k]);
                let p = dir.join(format!("{stem}.csv"));
                export_locality_csv(map, &p)?;
                written.push(p);
                let p = dir.join(format!("{stem}.pgm"));
                export_locality_image(map, &p)?;
                written.push(p);
            }
        }
        Observable::Effmask => {
            let fp = EffectiveMaskSet::of_layer(&masks, l)?;
            let nodes: Vec<NodeCount> = fp
                .in_degrees()
                .into_iter()
                .enumerate()
                .map(|(node, count)| NodeCount { node, count })
                .collect();
            let p = dir.join(format!("effmask_l{l}_{tag}.csv"));
            export_rows(&["node", "pixels"], &nodes, &p)?;
            written.push(p);
            let cover: Vec<f64> = fp
                .mask
                .rows()
                .into_iter()
                .map(|r| r.iter().filter(|&&b| b).count() as f64)
                .collect();
            let p = dir.join(format!("effmask_cover_l{l}_{tag}.{}", image_ext(&geom)));
            export_scaled_image(&cover, &geom, &p)?;
            written.push(p);
        }
        Observable::Pixmap => {
            let counts = connectivity(&masks, 0, Direction::Out, 1)?.values;
            let rows: Vec<PixelCount> = counts
                .iter()
                .enumerate()
                .map(|(i, &count)| {
                    let (x, y, c) = geom.pixel_coords(i);
                    PixelCount { x, y, c, count }
                })
                .collect();
            let p = dir.join(format!("pixmap_{tag}.csv"));
            export_rows(&["x", "y", "c", "count"], &rows, &p)?;
            written.push(p);
            let values: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let p = dir.join(format!("pixmap_{tag}.{}", image_ext(&geom)));
            export_scaled_image(&values, &geom, &p)?;
            written.push(p);
        }
        Observable::Binomial => {
            let hist = connectivity(&masks, l, Direction::In, 1)?;
            let m = masks.layer(l)?;
            let u = masks.layer_density()[l - 1];
            let k_max = m.nrows();
            let pmf = binomial_reference(m.nrows(), u, k_max)?;
            let mut observed = vec![0usize; k_max + 1];
            for &v in &hist.values {
                observed[v] += 1;
            }
            let n_nodes = hist.values.len() as f64;
            let last = hist.values.iter().copied().max().unwrap_or(0).max(
                pmf.iter().rposition(|&p| p * n_nodes >= 1e-6).unwrap_or(0),
            );
            let rows: Vec<BinomialRow> = (0..=last)
                .map(|k| BinomialRow {
                    k,
                    observed: observed[k],
                    expected: pmf[k] * n_nodes,
                })
                .collect();
            let p = dir.join(format!("binomial_l{l}_{tag}.csv"));
            export_rows(&["k", "observed", "expected"], &rows, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn image_ext(geom: &ImageGeometry) -> &'static str {
    if geom.channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

#[derive(Serialize)]
struct AblationRow {
    order: &'static str,
    removed: usize,
    accuracy: f64,
}

/// Validation accuracy with the lowest- and highest-`C^in` layer-1 nodes
/// cut off. Default counts: 0 to all nodes in sixteenths.
pub fn cmd_ablate(run_dir: &Path, iteration: usize, counts: Option<Vec<usize>>) -> Result<PathBuf> {
    let run = RunDir::open(run_dir)?;
    let (masks, params) = run.load_iteration(iteration)?;
    let cfg: RunConfig = serde_json::from_value(run.manifest.config.clone()).context("run configuration in manifest")?;
    let (_, val) = load_splits(&cfg.dataset)?;
    let n1 = masks.layer(1)?.ncols();
    let counts = counts.unwrap_or_else(|| {
        let mut c: Vec<usize> = (0..=16).map(|k| k * n1 / 16).collect();
        c.dedup();
        c
    });
    let mut rows = Vec::new();
    for (order, name) in [(AblationOrder::Ascending, "ascending"), (AblationOrder::Descending, "descending")] {
        for (removed, accuracy) in ablation_curve(&params, &masks, &val, order, &counts)? {
            rows.push(AblationRow {
                order: name,
                removed,
                accuracy,
            });
        }
    }
    let p = out_dir(&run, &None)?.join(format!("ablation_iter{iteration:03}.csv"));
    export_rows(&["order", "removed", "accuracy"], &rows, &p)?;
    Ok(p)
}

/// Images of the `top` nodes of a layer with the most input pixels: mask
/// images, or (layer 1, `weighted`) masked weights.
pub fn cmd_export_masks(
    run_dir: &Path,
    iteration: usize,
    top: usize,
    weighted: bool,
    layer: usize,
    out: Option<PathBuf>,
) -> Result<Vec<PathBuf>> {
    let run = RunDir::open(run_dir)?;
    let (masks, params) = run.load_iteration(iteration)?;
    let geom = run.manifest.geometry;
    let fp = EffectiveMaskSet::of_layer(&masks, layer)?;
    ensure!(top <= fp.n_nodes(), "--top {top} exceeds the {} nodes of layer {layer}", fp.n_nodes());
    if weighted && layer != 1 {
        bail!("weighted images need layer 1, whose weights act on pixels directly");
    }
    if top == 0 {
        return Ok(Vec::new());
    }
    let degrees = fp.in_degrees();
    let mut order: Vec<usize> = (0..degrees.len()).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(degrees[j]), j));
    let dir = out
        .unwrap_or_else(|| run.root().join("analysis"))
        .join(format!("masks_l{layer}_iter{iteration:03}{}", if weighted { "_weighted" } else { "" }));
    std::fs::create_dir_all(&dir)?;
    let ext = image_ext(&geom);
    let mut written = Vec::new();
    for (rank, &j) in order[..top].iter().enumerate() {
        let mask: Vec<bool> = fp.mask.column(j).to_vec();
        let p = dir.join(format!("rank{rank:03}_node{j:04}.{ext}"));
        if weighted {
            let w: Vec<f32> = params.layers[0].weights.column(j).to_vec();
            export_weighted_mask_image(&w, &mask, &geom, &p)?;
        } else {
            export_mask_image(&mask, &geom, &p)?;
        }
        written.push(p);
    }
    Ok(written)
}

/// Writes the configured dataset (after relabelling and rotation) as IDX
/// for one channel or CIFAR binary for 32x32x3 images.
pub fn cmd_write_dataset(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = load_full(&cfg.dataset)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let stem = out.display().to_string();
    if ds.geometry.channels == 1 {
        let images = PathBuf::from(format!("{stem}-images.idx"));
        let labels = PathBuf::from(format!("{stem}-labels.idx"));
        write_idx(&ds, &images, &labels)?;
        Ok(vec![images, labels])
    } else {
        let path = PathBuf::from(format!("{stem}.bin"));
        write_cifar_binary(&ds, &path)?;
        Ok(vec![path])
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    ensure!(cfg.dataset.format == DataFormat::Synthetic, "synth needs dataset.format \"synthetic\"");
    cmd_write_dataset(cfg, out)
}

pub fn cmd_cluster(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let d = &cfg.dataset;
    ensure!(
        d.cluster_mode.is_some() || d.random_relabel || d.label_modulo.is_some(),
        "cluster needs dataset.cluster_mode, random_relabel or label_modulo"
    );
    cmd_write_dataset(cfg, out)
}
