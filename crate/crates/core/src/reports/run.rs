//! Run directories: a JSON manifest plus the files it references.
//!
//! ```text
//! manifest.json
//! rewind.tkts              parameters at the rewind step
//! final.tkts               dense training runs only
//! train_curve.csv          dense training runs only
//! imp_curve.csv            iteration,u,best_val
//! iter_NNN/masks.tkms
//! iter_NNN/final.tkts      trained parameters of iteration NNN
//! iter_NNN/train_curve.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::binary::{load_checkpoint, load_masks, save_checkpoint, save_masks, FORMAT_VERSION};
use super::tables::{export_imp_curve, export_train_curve, load_train_curve, ImpCurveRow};
use super::{write_atomic, ReportError, Result};
use crate::datasets::{ImageGeometry, PIXEL_LAYOUT};
use crate::network::{MaskSet, ParamSet};
use crate::pruner::{ImpIteration, ImpObserver, ImpResume, StopReason};
use crate::trainer::{Checkpoint, TrainRecord};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Train,
    Imp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: usize,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    pub n: usize,
    pub u: f64,
    pub layer_density: Vec<f64>,
    pub best_val: Option<f64>,
    pub masks: String,
    pub params: String,
    pub curve: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub pixel_layout: String,
    pub kind: RunKind,
    /// Snapshot of the full run configuration.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub dims: Vec<usize>,
    pub geometry: ImageGeometry,
    pub rewind: Option<CheckpointEntry>,
    pub checkpoints: Vec<CheckpointEntry>,
    pub curve: Option<String>,
    pub iterations: Vec<IterationEntry>,
    pub stop: Option<StopReason>,
    /// Set once the run has finished; an unfinished IMP run can be resumed.
    pub complete: bool,
}

impl RunManifest {
    pub fn new(
        kind: RunKind,
        config: serde_json::Value,
        seeds: BTreeMap<String, u64>,
        dims: Vec<usize>,
        geometry: ImageGeometry,
    ) -> Self {
        RunManifest {
            format_version: FORMAT_VERSION,
            pixel_layout: PIXEL_LAYOUT.to_string(),
            kind,
            config,
            seeds,
            dims,
            geometry,
            rewind: None,
            checkpoints: Vec::new(),
            curve: None,
            iterations: Vec::new(),
            stop: None,
            complete: false,
        }
    }

    pub fn iteration(&self, n: usize) -> Result<&IterationEntry> {
        self.iterations.iter().find(|it| it.n == n).ok_or_else(|| {
            ReportError::Missing(format!(
                "iteration {n} (run holds {})",
                self.iterations.len()
            ))
        })
    }

    pub fn curve_rows(&self) -> Vec<ImpCurveRow> {
        self.iterations
            .iter()
            .map(|it| ImpCurveRow {
                iteration: it.n,
                u: it.u,
                best_val: it.best_val,
            })
            .collect()
    }
}

/// Writer bound to one run directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Starts a new run; refuses a directory that already holds one.
    pub fn create(root: impl Into<PathBuf>, manifest: RunManifest) -> Result<Self> {
        let root = root.into();
        if root.join(MANIFEST_FILE).exists() {
            return Err(ReportError::Exists(root.display().to_string()));
        }
        fs::create_dir_all(&root)?;
        let run = RunDir { root, manifest };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let text = super::read(&root.join(MANIFEST_FILE))?;
        let manifest: RunManifest = serde_json::from_slice(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ReportError::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(RunDir { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_manifest(&self) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(&self.manifest)?;
        text.push(b'\n');
        write_atomic(&self.root.join(MANIFEST_FILE), &text)
    }

    fn ensure_parent(&self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(path)
    }

    pub fn put_checkpoint(&self, rel: &str, params: &ParamSet<f32>) -> Result<()> {
        save_checkpoint(self.ensure_parent(rel)?, params)
    }

    pub fn put_masks(&self, rel: &str, masks: &MaskSet) -> Result<()> {
        save_masks(self.ensure_parent(rel)?, masks)
    }

    pub fn put_train_curve(&self, rel: &str, records: &[TrainRecord]) -> Result<()> {
        export_train_curve(records, self.ensure_parent(rel)?)
    }

    pub fn load_params(&self, rel: &str) -> Result<ParamSet<f32>> {
        load_checkpoint(self.path(rel))
    }

    pub fn load_iteration(&self, n: usize) -> Result<(MaskSet, ParamSet<f32>)> {
        let it = self.manifest.iteration(n)?;
        Ok((load_masks(self.path(&it.masks))?, load_checkpoint(self.path(&it.params))?))
    }

    pub fn load_rewind(&self) -> Result<Checkpoint> {
        let entry = self
            .manifest
            .rewind
            .as_ref()
            .ok_or_else(|| ReportError::Missing("rewind checkpoint".into()))?;
        Ok(Checkpoint {
            step: entry.step,
            params: load_checkpoint(self.path(&entry.path))?,
        })
    }

    /// Records one finished IMP iteration. The manifest is rewritten last,
    /// so it only ever lists iterations whose files are complete.
    pub fn record_iteration(
        &mut self,
        it: &ImpIteration,
        trained: &ParamSet<f32>,
        rewind: &Checkpoint,
    ) -> Result<()> {
        if self.manifest.rewind.is_none() {
            let path = "rewind.tkts".to_string();
            self.put_checkpoint(&path, &rewind.params)?;
            self.manifest.rewind = Some(CheckpointEntry {
                step: rewind.step,
                path,
            });
        }
        let dir = format!("iter_{:03}", it.n);
        let entry = IterationEntry {
            n: it.n,
            u: it.density,
            layer_density: it.layer_density.clone(),
            best_val: it.best_val,
            masks: format!("{dir}/masks.tkms"),
            params: format!("{dir}/final.tkts"),
            curve: format!("{dir}/train_curve.csv"),
        };
        self.put_masks(&entry.masks, &it.masks)?;
        self.put_checkpoint(&entry.params, trained)?;
        self.put_train_curve(&entry.curve, &it.records)?;
        self.manifest.iterations.retain(|e| e.n != it.n);
        self.manifest.iterations.push(entry);
        export_imp_curve(&self.manifest.curve_rows(), self.path("imp_curve.csv"))?;
        self.write_manifest()
    }

    pub fn finish(&mut self, stop: Option<StopReason>) -> Result<()> {
        self.manifest.stop = stop;
        self.manifest.complete = true;
        self.write_manifest()
    }

    /// State for continuing an unfinished IMP run from its last recorded
    /// iteration. `pruned_layers` selects the layers `u` is measured over.
    pub fn resume_state(&self, pruned_layers: &[usize]) -> Result<ImpResume> {
        if self.manifest.kind != RunKind::Imp {
            return Err(ReportError::Missing("IMP iterations in a training run".into()));
        }
        let mut iterations = Vec::with_capacity(self.manifest.iterations.len());
        for (k, e) in self.manifest.iterations.iter().enumerate() {
            if e.n != k {
                return Err(ReportError::Integrity(format!("iteration {} listed at position {k}", e.n)));
            }
            let masks = load_masks(self.path(&e.masks))?;
            iterations.push(ImpIteration {
                n: e.n,
                density: masks.density_of(pruned_layers),
                layer_density: masks.layer_density(),
                best_val: e.best_val,
                records: load_train_curve(self.path(&e.curve))?,
                masks,
            });
        }
        let last = self
            .manifest
            .iterations
            .last()
            .ok_or_else(|| ReportError::Missing("completed iteration to resume from".into()))?;
        Ok(ImpResume {
            last_params: load_checkpoint(self.path(&last.params))?,
            rewind: self.load_rewind()?,
            iterations,
        })
    }
}

impl ImpObserver for RunDir {
    fn iteration_done(
        &mut self,
        it: &ImpIteration,
        trained: &ParamSet<f32>,
        rewind: &Checkpoint,
    ) -> std::result::Result<ControlFlow<()>, String> {
        self.record_iteration(it, trained, rewind)
            .map(|()| ControlFlow::Continue(()))
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, split_train_val, ImageGeometry, PatchRect};
    use crate::network::{init_params, LayerDims};
    use crate::pruner::{resume_imp, run_imp, ImpConfig, NoObserver};
    use crate::trainer::TrainConfig;

    struct Halt<'a>(&'a mut RunDir, usize);

    impl ImpObserver for Halt<'_> {
        fn iteration_done(
            &mut self,
            it: &ImpIteration,
            trained: &ParamSet<f32>,
            rewind: &Checkpoint,
        ) -> std::result::Result<ControlFlow<()>, String> {
            self.0.record_iteration(it, trained, rewind).map_err(|e| e.to_string())?;
            Ok(if it.n == self.1 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
        }
    }

    #[test]
    fn resume_from_disk_matches_uninterrupted() {
        let g = ImageGeometry::new(4, 4, 1).unwrap();
        let patch = PatchRect { x: 1, y: 1, width: 2, height: 2 };
        let all = generate_synthetic(g, 20, patch, 2, 0.2, 3).unwrap();
        let (tr, va) = split_train_val(&all, 10, 0).unwrap();
        let d = LayerDims::new(vec![16, 10, 10, 2]).unwrap();
        let cfg = ImpConfig {
            rewind_step: 2,
            max_iterations: 3,
            train: TrainConfig { batch_size: 6, steps: 12, eval_every: 4, seed: 9, ..TrainConfig::default() },
            ..ImpConfig::default()
        };
        let whole = run_imp(init_params(&d, 9), &tr, &va, &cfg, &mut NoObserver).unwrap();

        let tmp = tempfile::tempdir().unwrap();
        let manifest = RunManifest::new(RunKind::Imp, serde_json::json!({}), BTreeMap::new(), d.sizes().to_vec(), g);
        let mut run = RunDir::create(tmp.path().join("run"), manifest.clone()).unwrap();
        assert!(RunDir::create(tmp.path().join("run"), manifest).is_err());
        run_imp(init_params(&d, 9), &tr, &va, &cfg, &mut Halt(&mut run, 1)).unwrap();
        drop(run);

        let mut run = RunDir::open(tmp.path().join("run")).unwrap();
        assert_eq!(run.manifest.iterations.len(), 2);
        let state = run.resume_state(&[1, 2]).unwrap();
        let rest = resume_imp(&tr, &va, &cfg, state, &mut run).unwrap();
        run.finish(Some(rest.stop)).unwrap();
        assert_eq!(rest.iterations, whole.iterations);
        let reopened = RunDir::open(tmp.path().join("run")).unwrap();
        assert!(reopened.manifest.complete);
        for it in &whole.iterations {
            let (m, _) = reopened.load_iteration(it.n).unwrap();
            assert_eq!(m, it.masks);
            assert_eq!(reopened.manifest.iterations[it.n].u, it.density);
        }
        let (_, p) = reopened.load_iteration(3).unwrap();
        assert_eq!(p, whole.final_params);
        assert!(reopened.load_iteration(4).is_err());
    }
}
