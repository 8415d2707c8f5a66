//! Training, checkpoints, inference and evaluation.

pub mod eval;
pub mod infer;
pub mod train;
pub mod weights;

use std::path::PathBuf;

use thiserror::Error;

use crate::anchorer::{generate_anchors, AnchorError, AnchorSet, AnchorSettings};
use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::geom::GeomError;
use crate::loss::LossError;
use crate::net::{NetConfig, NetError};

pub use eval::{evaluate, evaluate_detections, format_report, top1_detections, EvalConfig, Metrics, TagMetrics};
pub use infer::{decode_maps, detect, nms, DetectConfig, Detection};
pub use train::{clip_gradients, cosine_lr, format_log, train, train_from, StepLog, TrainConfig, TrainOutput};
pub use weights::{
    decode_weights, encode_weights, infer_net_config, load_weights, read_weights, save_weights, WEIGHTS_MAGIC,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image {index} is {width}x{height}, the model expects {expected}x{expected}")]
    ImageSize {
        index: usize,
        width: usize,
        height: usize,
        expected: usize,
    },
    #[error("numeric fault at step {step} in {component}")]
    NumericFault { step: usize, component: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the model predicts {model} anchors per cell but the anchor layout has {layout}")]
    AnchorMismatch { model: usize, layout: usize },
    #[error("weights: {0}")]
    Weights(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

impl EngineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// The anchor layout matching a network configuration.
pub fn anchors_for(config: &NetConfig) -> Result<AnchorSet, EngineError> {
    let set = generate_anchors(config.input_size, &AnchorSettings::default())?;
    if set.per_cell != config.anchors_per_cell {
        return Err(EngineError::AnchorMismatch {
            model: config.anchors_per_cell,
            layout: set.per_cell,
        });
    }
    Ok(set)
}

/// Worker thread count from `STLPD_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("STLPD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
