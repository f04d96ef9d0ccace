//! Model assembly, training, evaluation, the ablation grid and file formats.

mod checkpoint;
mod checks;
mod config;
mod data;
mod model;
mod run;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use checks::{gradcheck_suite, model_gradcheck, primitive_names, GradcheckEntry, SHAPES_PER_OP, SUITE_TOLERANCE};
pub use config::{DataConfig, ExperimentConfig, LossWeights, ModelConfig, TrainConfig};
pub use data::{Dataset, Sample};
pub use model::{build_model, Forward, LossParts, Model};
pub use run::{
    ablate, evaluate, metrics_csv, train, CellReport, EvalReport, ExperimentReport, IdentityStub, MeanPose, MetricRow,
    Predictor, ReferenceReport, RunReport, Spread, TrainOutcome, CELLS,
};

use crate::diffusion::DiffusionError;
use crate::graph::GraphError;
use crate::loss::LossError;
use crate::metrics::MetricsError;
use crate::synth::SynthError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Divergence { .. } => "divergence",
            HarnessError::Data(_) => "data",
            HarnessError::Checkpoint(_) => "checkpoint",
            HarnessError::Tensor(_) => "tensor",
            HarnessError::Graph(_) => "graph",
            HarnessError::Diffusion(_) => "diffusion",
            HarnessError::Loss(_) => "loss",
            HarnessError::Metrics(_) => "metrics",
            HarnessError::Synth(_) => "synth",
            HarnessError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
