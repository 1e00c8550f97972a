//! Training, checkpoints, the iterative clustering driver, benchmarking and plots.

mod checkpoint;
mod cluster;
mod config;
mod evaluate;
mod plot;
mod train;

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cluster::{cluster_points, iterative_filtering, ClusterOptions, ClusteringResult, Removal};
pub use config::{ModelKind, TrainConfig};
pub use evaluate::{cluster_log_densities, evaluate, EvalOptions};
pub use plot::{emit_plot, points_from_rows, render_svg, PALETTE};
pub use train::{train, train_with, StepLog, LOSS_WINDOW};

use crate::act_st::ActStModel;
use crate::filtering::FilterModel;

/// A built network: either a filtering model or the ACT-ST baseline.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Filter(FilterModel),
    ActSt(ActStModel),
}
