//! JSON run configuration. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use ticket_core::datasets::{ClusterMode, ImageGeometry, PatchRect};
use ticket_core::network::LayerDims;
use ticket_core::pruner::{ImpConfig, RewindScope};
use ticket_core::trainer::{Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Idx,
    Cifar,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub n_per_class: usize,
    pub n_classes: usize,
    pub patch: PatchRect,
    pub noise_sd: f64,
}

fn one() -> usize {
    1
}

impl SyntheticConfig {
    pub fn geometry(&self) -> Result<ImageGeometry> {
        Ok(ImageGeometry::new(self.width, self.height, self.channels)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DataFormat,
    /// idx: `[images, labels]`; cifar: one or more batch files.
    pub paths: Vec<PathBuf>,
    /// Separate validation files; without them `n_val` images are split off.
    pub val_paths: Option<Vec<PathBuf>>,
    pub synthetic: Option<SyntheticConfig>,
    /// Fraction of the training images kept.
    pub fraction: f64,
    /// Relabel into macro-classes (`random`: label mod 10; `semantic`: table).
    pub cluster_mode: Option<ClusterMode>,
    pub mapping_path: Option<PathBuf>,
    /// Replace every label with a uniformly random one over the same classes.
    pub random_relabel: bool,
    /// Finally map every label `l` to `l mod label_modulo`.
    pub label_modulo: Option<usize>,
    pub rotate_degrees: f64,
    pub translate_augment: bool,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            format: DataFormat::Synthetic,
            paths: Vec::new(),
            val_paths: None,
            synthetic: None,
            fraction: 1.0,
            cluster_mode: None,
            mapping_path: None,
            random_relabel: false,
            label_modulo: None,
            rotate_degrees: 0.0,
            translate_augment: false,
            n_val: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            steps: t.steps,
            eval_every: t.eval_every,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpSection {
    pub p: f64,
    pub rewind_step: usize,
    pub stop_node_fraction: f64,
    pub max_iterations: usize,
    pub layers_to_prune: Option<Vec<usize>>,
    pub rewind_scope: RewindScope,
}

impl Default for ImpSection {
    fn default() -> Self {
        let i = ImpConfig::default();
        ImpSection {
            p: i.prune_fraction,
            rewind_step: i.rewind_step,
            stop_node_fraction: i.stop_node_fraction,
            max_iterations: i.max_iterations,
            layers_to_prune: i.layers_to_prune,
            rewind_scope: i.rewind_scope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub imp: ImpSection,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn dims(&self) -> Result<LayerDims> {
        Ok(LayerDims::new(self.network.dims.clone())?)
    }

    /// Trainer settings for the dense run; `rewind_step` is filled in when
    /// it lies within the run.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            steps: t.steps,
            eval_every: t.eval_every,
            rewind_step: (self.imp.rewind_step <= t.steps).then_some(self.imp.rewind_step),
            seed: t.seed,
            translate_augment: self.dataset.translate_augment,
        }
    }

    pub fn imp_config(&self) -> ImpConfig {
        let i = &self.imp;
        ImpConfig {
            prune_fraction: i.p,
            rewind_step: i.rewind_step,
            stop_node_fraction: i.stop_node_fraction,
            max_iterations: i.max_iterations,
            layers_to_prune: i.layers_to_prune.clone(),
            rewind_scope: i.rewind_scope,
            train: TrainConfig {
                rewind_step: None,
                ..self.train_config()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        self.train_config().validate()?;
        let d = &self.dataset;
        if !(d.fraction > 0.0 && d.fraction <= 1.0) {
            bail!("dataset.fraction {} outside (0, 1]", d.fraction);
        }
        if !d.rotate_degrees.is_finite() {
            bail!("dataset.rotate_degrees must be finite");
        }
        if d.label_modulo == Some(0) {
            bail!("dataset.label_modulo must be positive");
        }
        if d.cluster_mode.is_some() && d.format == DataFormat::Synthetic {
            bail!("cluster_mode applies to idx/cifar datasets");
        }
        if d.mapping_path.is_some() && d.cluster_mode != Some(ClusterMode::Semantic) {
            bail!("mapping_path requires cluster_mode \"semantic\"");
        }
        if d.cluster_mode == Some(ClusterMode::Semantic) && d.mapping_path.is_none() {
            bail!("cluster_mode \"semantic\" requires mapping_path");
        }
        match d.format {
            DataFormat::Synthetic => {
                let s = d
                    .synthetic
                    .as_ref()
                    .context("format \"synthetic\" needs a dataset.synthetic section")?;
                let geom = s.geometry()?;
                if geom.input_size() != dims.input_size() {
                    bail!(
                        "network input {} does not match {}x{}x{} images",
                        dims.input_size(),
                        s.width,
                        s.height,
                        s.channels
                    );
                }
                if !d.paths.is_empty() || d.val_paths.is_some() {
                    bail!("synthetic datasets take no paths");
                }
            }
            DataFormat::Idx => {
                if d.paths.len() != 2 {
                    bail!("idx datasets need paths [images, labels]");
                }
                if d.val_paths.as_ref().is_some_and(|v| v.len() != 2) {
                    bail!("idx val_paths must be [images, labels]");
                }
            }
            DataFormat::Cifar => {
                if d.paths.is_empty() || d.val_paths.as_ref().is_some_and(|v| v.is_empty()) {
                    bail!("cifar datasets need at least one batch file");
                }
            }
        }
        if d.format != DataFormat::Synthetic && d.synthetic.is_some() {
            bail!("dataset.synthetic only applies to format \"synthetic\"");
        }
        // The rewind step only has to fall inside the run when pruning.
        ImpConfig {
            rewind_step: 0,
            ..self.imp_config()
        }
        .validate(dims.n_hidden())?;
        Ok(())
    }
}
