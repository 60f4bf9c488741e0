//! Training, iterative magnitude pruning and structural analysis of
//! sparse fully-connected image classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`datasets`] loads, generates and transforms image datasets and fixes
//!   the canonical pixel layout `i = c*H*W + y*W + x`.
//! * [`network`] holds the masked MLP with batch normalization, its forward
//!   and backward passes, and accuracy evaluation.
//! * [`trainer`] runs deterministic mini-batch SGD / Adam with rewind
//!   checkpointing.
//! * [`pruner`] implements per-layer magnitude pruning and the IMP loop.
//! * [`observables`] computes connectivity, locality maps, effective masks
//!   and ablation curves.
//! * [`reports`] persists checkpoints, masks, CSV tables and netpbm images.

pub mod datasets;
pub mod network;
pub mod observables;
pub mod pruner;
pub mod reports;
pub mod rng;
pub mod trainer;

pub use datasets::{ClassMapping, ClusterMode, ImageDataset, ImageGeometry, PatchRect};
pub use network::{LayerDims, MaskSet, Mode, ParamSet};
pub use pruner::{ImpConfig, ImpIteration, ImpRun};
pub use trainer::{Checkpoint, Optimizer, TrainConfig, TrainRecord};
